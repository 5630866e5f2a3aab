//! Cell-based search space: candidate ops, mixed edges, stacked cells, and
//! the discrete genotype extracted from architecture parameters.

mod genotype;
mod network;
mod ops;

use thiserror::Error;

use crate::autodiff::AutodiffError;

pub use genotype::{discretize, ExportFormat, Gene, Genotype, GENOTYPE_SCHEMA_VERSION};
pub use network::{
    accuracy, argmax, build_fixed_network, build_super_network, edge_offset, node_edges, ArchParams, Network, NetworkSpec, ALPHA_INIT_STD,
    INTERMEDIATE_NODES, NUM_EDGES,
};
pub use ops::{apply_op, mixed_op_forward, BoundOp, OpKind, ReluCache, NUM_OPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchSpaceError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("unknown op {0:?}")]
    UnknownOp(String),
    #[error("invalid genotype: {0}")]
    InvalidGenotype(String),
    #[error("genotype schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("genotype parse error: {0}")]
    Parse(String),
    #[error("network has no architecture parameters")]
    NoArchParams,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Sum of element counts over the weight section of a store.
pub fn parameter_count(store: &crate::autodiff::ParamStore) -> usize {
    store.parameter_count()
}
