use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::genotype::Genotype;
use super::ops::{self, apply_op, mixed_op_forward, BoundOp, OpKind, ReluCache, NUM_OPS};
use super::SearchSpaceError;
use crate::autodiff::{AutodiffError, ComputeGraph, NodeId, ParamId, ParamStore, Section, Window};
use crate::tensor::Tensor;

pub const INTERMEDIATE_NODES: usize = 4;
pub const NUM_EDGES: usize = 14;
pub const ALPHA_INIT_STD: f64 = 1e-3;

/// Index of the first edge feeding intermediate node `j`.
pub fn edge_offset(j: usize) -> usize {
    2 * j + j * j.saturating_sub(1) / 2
}

/// `(edge index, predecessor)` pairs feeding node `j`.
pub fn node_edges(j: usize) -> impl Iterator<Item = (usize, usize)> {
    let start = edge_offset(j);
    (0..j + 2).map(move |i| (start + i, i))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub num_cells: usize,
    pub init_channels: usize,
    pub num_classes: usize,
    /// `(channels, height, width)` of one input image.
    pub input_shape: (usize, usize, usize),
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), SearchSpaceError> {
        let bad = |msg: String| Err(SearchSpaceError::InvalidSpec(msg));
        let (c, h, w) = self.input_shape;
        if self.num_cells < 2 {
            return bad(format!("num_cells must be at least 2, got {}", self.num_cells));
        }
        if self.init_channels == 0 || c == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return bad(format!("input height and width must be positive multiples of 4, got {h}x{w}"));
        }
        Ok(())
    }

    pub fn reduction_positions(&self) -> [usize; 2] {
        [self.num_cells / 3, 2 * self.num_cells / 3]
    }

    pub fn is_reduction(&self, cell: usize) -> bool {
        self.reduction_positions().contains(&cell)
    }
}

/// Architecture matrices, one row per edge and one column per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchParams {
    pub normal: Tensor,
    pub reduce: Tensor,
}

impl ArchParams {
    pub fn zeros() -> Self {
        Self {
            normal: Tensor::zeros(&[NUM_EDGES, NUM_OPS]),
            reduce: Tensor::zeros(&[NUM_EDGES, NUM_OPS]),
        }
    }

    pub fn random(rng: &mut ChaCha8Rng, std: f64) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut draw = || {
            Tensor::new(
                vec![NUM_EDGES, NUM_OPS],
                (0..NUM_EDGES * NUM_OPS).map(|_| normal.sample(rng)).collect(),
            )
            .expect("finite samples")
        };
        let n = draw();
        let r = draw();
        Self { normal: n, reduce: r }
    }

    pub fn bit_eq(&self, other: &ArchParams) -> bool {
        self.normal.bit_eq(&other.normal) && self.reduce.bit_eq(&other.reduce)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Preprocess {
    ReluConvBn(ParamId),
    FactorizedReduce(ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
struct EdgeOps {
    index: usize,
    from: usize,
    ops: Vec<BoundOp>,
}

#[derive(Debug, Clone, PartialEq)]
struct Cell {
    reduction: bool,
    pre0: Preprocess,
    pre1: Preprocess,
    nodes: Vec<Vec<EdgeOps>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ArchIds {
    normal: ParamId,
    reduce: ParamId,
}

/// A stacked-cell network: either the super-network with every candidate on
/// every edge, or a fixed network derived from a genotype. The struct holds
/// parameter ids only; values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    stem: ParamId,
    cells: Vec<Cell>,
    classifier: (ParamId, ParamId),
    arch: Option<ArchIds>,
    genotype: Option<Genotype>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: String, shape: [usize; 4]) -> ParamId {
        let value = ops::kaiming(&mut self.rng, &shape, ops::conv_fan_in(&shape));
        self.store.register(name, Section::Weight, value)
    }

    fn preprocess(&mut self, name: String, c_in: usize, c_out: usize, factorized: bool) -> Preprocess {
        if factorized {
            let half = c_out / 2;
            Preprocess::FactorizedReduce(
                self.conv(format!("{name}.conv1"), [half, c_in, 1, 1]),
                self.conv(format!("{name}.conv2"), [c_out - half, c_in, 1, 1]),
            )
        } else {
            Preprocess::ReluConvBn(self.conv(format!("{name}.conv"), [c_out, c_in, 1, 1]))
        }
    }
}

fn build(spec: &NetworkSpec, seed: u64, genotype: Option<&Genotype>) -> Result<(Network, ParamStore), SearchSpaceError> {
    spec.validate()?;
    if let Some(g) = genotype {
        g.validate()?;
    }
    let mut store = ParamStore::new();
    let mut b = Builder {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let c = spec.init_channels;
    let c_stem = 3 * c;
    let stem = b.conv("stem.conv".into(), [c_stem, spec.input_shape.0, 3, 3]);

    let (mut c_pp, mut c_p, mut c_cur) = (c_stem, c_stem, c);
    let mut reduction_prev = false;
    let mut cells = Vec::with_capacity(spec.num_cells);
    for k in 0..spec.num_cells {
        let reduction = spec.is_reduction(k);
        if reduction {
            c_cur *= 2;
        }
        let pre0 = b.preprocess(format!("cells.{k}.pre0"), c_pp, c_cur, reduction_prev);
        let pre1 = b.preprocess(format!("cells.{k}.pre1"), c_p, c_cur, false);
        let mut nodes = Vec::with_capacity(INTERMEDIATE_NODES);
        for j in 0..INTERMEDIATE_NODES {
            let mut edges = Vec::new();
            for (index, from) in node_edges(j) {
                let kinds: Vec<OpKind> = match genotype {
                    None => OpKind::ALL.to_vec(),
                    Some(g) => {
                        let genes = if reduction { &g.reduce[j] } else { &g.normal[j] };
                        genes.iter().filter(|gene| gene.input == from).map(|gene| gene.op).collect()
                    }
                };
                if kinds.is_empty() {
                    continue;
                }
                let prefix = format!("cells.{k}.edges.{index}");
                let ops = kinds
                    .into_iter()
                    .map(|kind| ops::register_op(b.store, &mut b.rng, &prefix, kind, c_cur))
                    .collect();
                edges.push(EdgeOps { index, from, ops });
            }
            nodes.push(edges);
        }
        cells.push(Cell {
            reduction,
            pre0,
            pre1,
            nodes,
        });
        reduction_prev = reduction;
        c_pp = c_p;
        c_p = INTERMEDIATE_NODES * c_cur;
    }

    let bound = 1.0 / (c_p as f64).sqrt();
    let w = ops::uniform(&mut b.rng, &[spec.num_classes, c_p], bound);
    let bias = ops::uniform(&mut b.rng, &[spec.num_classes], bound);
    let classifier = (
        b.store.register("classifier.weight", Section::Weight, w),
        b.store.register("classifier.bias", Section::Weight, bias),
    );

    let arch = if genotype.is_none() {
        let alpha = ArchParams::random(&mut b.rng, ALPHA_INIT_STD);
        Some(ArchIds {
            normal: b.store.register("alpha.normal", Section::Arch, alpha.normal),
            reduce: b.store.register("alpha.reduce", Section::Arch, alpha.reduce),
        })
    } else {
        None
    };

    let net = Network {
        spec: *spec,
        stem,
        cells,
        classifier,
        arch,
        genotype: genotype.cloned(),
    };
    Ok((net, store))
}

/// Builds the super-network and its parameters. Weights and α are drawn from
/// one generator seeded with `seed`, in registration order.
pub fn build_super_network(spec: &NetworkSpec, seed: u64) -> Result<(Network, ParamStore), SearchSpaceError> {
    build(spec, seed, None)
}

/// Builds the network that keeps only the genotype's chosen op on each kept edge.
pub fn build_fixed_network(genotype: &Genotype, spec: &NetworkSpec, seed: u64) -> Result<(Network, ParamStore), SearchSpaceError> {
    build(spec, seed, Some(genotype))
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn is_super(&self) -> bool {
        self.arch.is_some()
    }

    pub fn genotype(&self) -> Option<&Genotype> {
        self.genotype.as_ref()
    }

    /// Ids of `(alpha_normal, alpha_reduce)` for the super-network.
    pub fn arch_ids(&self) -> Option<(ParamId, ParamId)> {
        self.arch.map(|a| (a.normal, a.reduce))
    }

    pub fn arch_params(&self, store: &ParamStore) -> Option<ArchParams> {
        let a = self.arch?;
        Some(ArchParams {
            normal: store.get(a.normal).ok()?.clone(),
            reduce: store.get(a.reduce).ok()?.clone(),
        })
    }

    pub fn set_arch_params(&self, store: &mut ParamStore, arch: &ArchParams) -> Result<(), SearchSpaceError> {
        let a = self.arch.ok_or(SearchSpaceError::NoArchParams)?;
        store.set(a.normal, arch.normal.clone())?;
        store.set(a.reduce, arch.reduce.clone())?;
        Ok(())
    }

    fn preprocess(
        &self,
        graph: &mut ComputeGraph,
        store: &ParamStore,
        cache: &mut ReluCache,
        pre: &Preprocess,
        x: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let r = cache.relu(graph, x);
        let one = Window::new(1, 1, 0, 1);
        match *pre {
            Preprocess::ReluConvBn(w) => {
                let wn = graph.param(store, w)?;
                let y = graph.conv2d(r, wn, one)?;
                graph.batch_norm(y)
            }
            Preprocess::FactorizedReduce(w1, w2) => {
                let two = Window::new(1, 2, 0, 1);
                let w1n = graph.param(store, w1)?;
                let a = graph.conv2d(r, w1n, two)?;
                let shifted = graph.crop(r, 1, 1)?;
                let w2n = graph.param(store, w2)?;
                let b = graph.conv2d(shifted, w2n, two)?;
                let y = graph.concat_channels(&[a, b])?;
                graph.batch_norm(y)
            }
        }
    }

    /// Records the forward pass for `images` and returns the logits node.
    pub fn forward(&self, graph: &mut ComputeGraph, store: &ParamStore, images: NodeId) -> Result<NodeId, AutodiffError> {
        let (_, c, h, w) = graph.value(images).dims4()?;
        let (sc, sh, sw) = self.spec.input_shape;
        if (c, h, w) != (sc, sh, sw) {
            return Err(AutodiffError::Shape {
                op: "network_input",
                detail: format!(
                    "expected images of shape [n, {sc}, {sh}, {sw}], got {:?}",
                    graph.value(images).shape()
                ),
            });
        }
        let mut cache = ReluCache::new();
        let weights = match self.arch {
            Some(a) => {
                let an = graph.param(store, a.normal)?;
                let ar = graph.param(store, a.reduce)?;
                Some((graph.softmax_rows(an)?, graph.softmax_rows(ar)?))
            }
            None => None,
        };

        let stem_w = graph.param(store, self.stem)?;
        let s = graph.conv2d(images, stem_w, Window::new(3, 1, 1, 1))?;
        let s = graph.batch_norm(s)?;
        let (mut prev_prev, mut prev) = (s, s);
        for cell in &self.cells {
            let s0 = self.preprocess(graph, store, &mut cache, &cell.pre0, prev_prev)?;
            let s1 = self.preprocess(graph, store, &mut cache, &cell.pre1, prev)?;
            let mut states = vec![s0, s1];
            for edges in &cell.nodes {
                let mut terms = Vec::with_capacity(edges.len());
                for edge in edges {
                    let stride = if cell.reduction && edge.from < 2 { 2 } else { 1 };
                    let x = states[edge.from];
                    let y = match (weights, edge.ops.as_slice()) {
                        (Some((wn, wr)), ops) => {
                            let wsel = if cell.reduction { wr } else { wn };
                            mixed_op_forward(graph, store, &mut cache, wsel, edge.index, ops, x, stride)?
                        }
                        (None, [op]) => apply_op(graph, store, &mut cache, op, x, stride)?,
                        (None, ops) => {
                            let outs = ops
                                .iter()
                                .map(|op| apply_op(graph, store, &mut cache, op, x, stride))
                                .collect::<Result<Vec<_>, _>>()?;
                            graph.add(&outs)?
                        }
                    };
                    terms.push(y);
                }
                let node = if terms.len() == 1 { terms[0] } else { graph.add(&terms)? };
                states.push(node);
            }
            let out = graph.concat_channels(&states[2..])?;
            prev_prev = prev;
            prev = out;
        }
        let pooled = graph.global_avg_pool(prev)?;
        let (cw, cb) = self.classifier;
        let wn = graph.param(store, cw)?;
        let bn = graph.param(store, cb)?;
        graph.linear(pooled, wn, bn)
    }

    /// Forward plus mean cross-entropy. Returns `(loss, logits)` nodes.
    pub fn loss(
        &self,
        graph: &mut ComputeGraph,
        store: &ParamStore,
        images: &Tensor,
        labels: &[usize],
    ) -> Result<(NodeId, NodeId), AutodiffError> {
        let x = graph.input(images.clone());
        let logits = self.forward(graph, store, x)?;
        let loss = graph.softmax_cross_entropy(logits, labels)?;
        Ok((loss, logits))
    }
}

/// Fraction of rows whose argmax equals the label. Ties go to the lowest class.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let classes = logits.shape()[1];
    let correct = logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    correct as f64 / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_offsets() {
        assert_eq!((0..4).map(edge_offset).collect::<Vec<_>>(), vec![0, 2, 5, 9]);
        assert_eq!(edge_offset(4), NUM_EDGES);
        let all: Vec<usize> = (0..4).flat_map(|j| node_edges(j).map(|(e, _)| e)).collect();
        assert_eq!(all, (0..14).collect::<Vec<_>>());
    }

    #[test]
    fn reduction_positions_for_six_cells() {
        let spec = NetworkSpec {
            num_cells: 6,
            init_channels: 4,
            num_classes: 10,
            input_shape: (3, 8, 8),
        };
        assert_eq!(spec.reduction_positions(), [2, 4]);
    }

    #[test]
    fn spec_validation() {
        let mut spec = NetworkSpec {
            num_cells: 1,
            init_channels: 4,
            num_classes: 10,
            input_shape: (3, 8, 8),
        };
        assert!(spec.validate().is_err());
        spec.num_cells = 2;
        assert!(spec.validate().is_ok());
        spec.input_shape = (3, 6, 8);
        assert!(spec.validate().is_err());
    }
}
