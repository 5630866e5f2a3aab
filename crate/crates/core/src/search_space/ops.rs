use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SearchSpaceError;
use crate::autodiff::{AutodiffError, ComputeGraph, NodeId, ParamId, ParamStore, Section, Window};
use crate::tensor::Tensor;

/// Candidate operation on a cell edge. Declaration order is the ordinal used
/// for tie-breaking and for the column order of the architecture matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5")]
    DilConv5x5,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    Identity,
    Zero,
}

pub const NUM_OPS: usize = 8;

impl OpKind {
    pub const ALL: [OpKind; NUM_OPS] = [
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::Identity,
        OpKind::Zero,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<OpKind> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::Identity => "identity",
            OpKind::Zero => "zero",
        }
    }

    /// Weight tensor shapes for `channels` channels, in registration order.
    pub fn param_shapes(self, channels: usize) -> Vec<(&'static str, Vec<usize>)> {
        let c = channels;
        match self {
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                let k = if self == OpKind::SepConv3x3 { 3 } else { 5 };
                vec![
                    ("dw1", vec![c, 1, k, k]),
                    ("pw1", vec![c, c, 1, 1]),
                    ("dw2", vec![c, 1, k, k]),
                    ("pw2", vec![c, c, 1, 1]),
                ]
            }
            OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
                let k = if self == OpKind::DilConv3x3 { 3 } else { 5 };
                vec![("dw", vec![c, 1, k, k]), ("pw", vec![c, c, 1, 1])]
            }
            OpKind::MaxPool3x3 | OpKind::AvgPool3x3 | OpKind::Identity | OpKind::Zero => Vec::new(),
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = SearchSpaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|op| op.name() == s)
            .ok_or_else(|| SearchSpaceError::UnknownOp(s.to_string()))
    }
}

/// An op instance bound to its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundOp {
    pub kind: OpKind,
    pub params: Vec<ParamId>,
}

/// Kaiming-normal filter init with `fan_in` inputs per output.
pub(crate) fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("finite samples")
}

/// Uniform init in `[-bound, bound)`.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("finite samples")
}

/// Fan-in of a conv filter `[out, in, k, k]`.
pub(crate) fn conv_fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

pub(crate) fn register_op(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, kind: OpKind, channels: usize) -> BoundOp {
    let params = kind
        .param_shapes(channels)
        .into_iter()
        .map(|(name, shape)| {
            let value = kaiming(rng, &shape, conv_fan_in(&shape));
            store.register(format!("{prefix}.{}.{name}", kind.name()), Section::Weight, value)
        })
        .collect();
    BoundOp { kind, params }
}

/// Per-forward memo so that candidates sharing an input reuse one relu node.
#[derive(Debug, Default)]
pub struct ReluCache {
    map: HashMap<NodeId, NodeId>,
}

impl ReluCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn relu(&mut self, graph: &mut ComputeGraph, x: NodeId) -> NodeId {
        *self.map.entry(x).or_insert_with(|| graph.relu(x))
    }
}

fn relu_dw_pw_bn(
    graph: &mut ComputeGraph,
    store: &ParamStore,
    cache: &mut ReluCache,
    x: NodeId,
    dw: ParamId,
    pw: ParamId,
    win: Window,
) -> Result<NodeId, AutodiffError> {
    let r = cache.relu(graph, x);
    let dwn = graph.param(store, dw)?;
    let y = graph.depthwise_conv2d(r, dwn, win)?;
    let pwn = graph.param(store, pw)?;
    let y = graph.conv2d(y, pwn, Window::new(1, 1, 0, 1))?;
    graph.batch_norm(y)
}

/// Applies one candidate op at the given stride.
pub fn apply_op(
    graph: &mut ComputeGraph,
    store: &ParamStore,
    cache: &mut ReluCache,
    op: &BoundOp,
    x: NodeId,
    stride: usize,
) -> Result<NodeId, AutodiffError> {
    match op.kind {
        OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
            let k = if op.kind == OpKind::SepConv3x3 { 3 } else { 5 };
            let y = relu_dw_pw_bn(graph, store, cache, x, op.params[0], op.params[1], Window::new(k, stride, k / 2, 1))?;
            relu_dw_pw_bn(graph, store, cache, y, op.params[2], op.params[3], Window::new(k, 1, k / 2, 1))
        }
        OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
            let k = if op.kind == OpKind::DilConv3x3 { 3 } else { 5 };
            relu_dw_pw_bn(graph, store, cache, x, op.params[0], op.params[1], Window::new(k, stride, k - 1, 2))
        }
        OpKind::MaxPool3x3 => graph.max_pool(x, Window::new(3, stride, 1, 1)),
        OpKind::AvgPool3x3 => graph.avg_pool(x, Window::new(3, stride, 1, 1)),
        OpKind::Identity if stride == 1 => Ok(x),
        OpKind::Identity => graph.subsample(x, stride),
        OpKind::Zero => graph.zero(x, stride),
    }
}

/// Softmax-weighted sum of every candidate on one edge. `weights` holds the
/// softmax of an architecture matrix and `row` selects the edge.
#[allow(clippy::too_many_arguments)]
pub fn mixed_op_forward(
    graph: &mut ComputeGraph,
    store: &ParamStore,
    cache: &mut ReluCache,
    weights: NodeId,
    row: usize,
    ops: &[BoundOp],
    x: NodeId,
    stride: usize,
) -> Result<NodeId, AutodiffError> {
    let outputs = ops
        .iter()
        .map(|op| apply_op(graph, store, cache, op, x, stride))
        .collect::<Result<Vec<_>, _>>()?;
    graph.weighted_sum(weights, row, &outputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for op in OpKind::ALL {
            assert_eq!(op.name().parse::<OpKind>().unwrap(), op);
            assert_eq!(OpKind::from_ordinal(op.ordinal()), Some(op));
        }
        assert!("conv_7x7".parse::<OpKind>().is_err());
    }

    #[test]
    fn edge_parameter_formula() {
        for c in [1, 4, 8, 16] {
            let total: usize = OpKind::ALL
                .iter()
                .flat_map(|op| op.param_shapes(c))
                .map(|(_, s)| s.iter().product::<usize>())
                .sum();
            assert_eq!(total, 102 * c + 6 * c * c);
        }
    }
}
