use std::collections::HashMap;

use super::kernels::{self, ConvDims, PoolDims, Window};
use super::params::{Gradients, ParamId, ParamStore, SectionFilter};
use super::AutodiffError;
use crate::tensor::Tensor;

/// Small constant added to the batch variance inside batch norm.
pub const BN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// Primitive operation recorded on the tape.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Input,
    Param(ParamId),
    Relu,
    BatchNorm,
    Conv2d(Window),
    DepthwiseConv2d(Window),
    MaxPool(Window),
    AvgPool(Window),
    Subsample(usize),
    Zero,
    Crop { top: usize, left: usize },
    Linear,
    GlobalAvgPool,
    SoftmaxRows,
    WeightedSum { row: usize },
    ConcatChannels,
    Add,
    Mul,
    Sum,
    SoftmaxCrossEntropy,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Input => "input",
            Primitive::Param(_) => "param",
            Primitive::Relu => "relu",
            Primitive::BatchNorm => "batch_norm",
            Primitive::Conv2d(_) => "conv2d",
            Primitive::DepthwiseConv2d(_) => "depthwise_conv2d",
            Primitive::MaxPool(_) => "max_pool",
            Primitive::AvgPool(_) => "avg_pool",
            Primitive::Subsample(_) => "subsample",
            Primitive::Zero => "zero",
            Primitive::Crop { .. } => "crop",
            Primitive::Linear => "linear",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::SoftmaxRows => "softmax",
            Primitive::WeightedSum { .. } => "scalar_weighted_sum",
            Primitive::ConcatChannels => "concat_channels",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Sum => "sum",
            Primitive::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
enum Saved {
    None,
    InvStd(Vec<f64>),
    ArgMax(Vec<u32>),
    Counts(Vec<f64>),
    CrossEntropy { probs: Vec<f64>, labels: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    prim: Primitive,
    inputs: Vec<NodeId>,
    value: Tensor,
    saved: Saved,
}

/// Append-only tape of primitive ops. Insertion order is a topological order;
/// backward walks it strictly in reverse.
#[derive(Debug, Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape { op, detail: detail.into() }
}

impl ComputeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn primitive(&self, id: NodeId) -> &Primitive {
        &self.nodes[id.0].prim
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    fn push(&mut self, prim: Primitive, inputs: Vec<NodeId>, value: Tensor, saved: Saved) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node {
            prim,
            inputs,
            value,
            saved,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn dims4(&self, op: &'static str, id: NodeId) -> Result<(usize, usize, usize, usize), AutodiffError> {
        self.value(id)
            .dims4()
            .map_err(|_| shape_err(op, format!("expected NCHW input, got {:?}", self.value(id).shape())))
    }

    /// Leaf holding data that needs no gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Primitive::Input, Vec::new(), value, Saved::None)
    }

    /// Leaf holding a snapshot of a stored parameter. Repeated calls for the
    /// same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId, AutodiffError> {
        if let Some(&node) = self.param_nodes.get(&id) {
            return Ok(node);
        }
        let value = store.get(id)?.clone();
        let node = self.push(Primitive::Param(id), Vec::new(), value, Saved::None);
        self.param_nodes.insert(id, node);
        Ok(node)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor::from_parts(src.shape().to_vec(), data);
        self.push(Primitive::Relu, vec![x], out, Saved::None)
    }

    /// Per-channel normalization over batch and spatial axes, no affine.
    pub fn batch_norm(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let (n, c, h, w) = self.dims4("batch_norm", x)?;
        let mut out = vec![0.0; n * c * h * w];
        let inv_std = kernels::batch_norm_forward(self.value(x).data(), &mut out, n, c, h * w, BN_EPS);
        let out = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.push(Primitive::BatchNorm, vec![x], out, Saved::InvStd(inv_std)))
    }

    fn conv_dims(&self, op: &'static str, x: NodeId, filt: NodeId, win: &Window, depthwise: bool) -> Result<ConvDims, AutodiffError> {
        let (n, c, h, w) = self.dims4(op, x)?;
        let fshape = self.value(filt).shape();
        let (cout, cin_f) = match *fshape {
            [co, ci, kh, kw] if kh == win.kernel && kw == win.kernel => (co, ci),
            _ => {
                return Err(shape_err(
                    op,
                    format!("filter shape {fshape:?} does not match kernel {}", win.kernel),
                ))
            }
        };
        if depthwise && (cin_f != 1 || cout != c) {
            return Err(shape_err(op, format!("depthwise filter {fshape:?} for {c} channels")));
        }
        if !depthwise && cin_f != c {
            return Err(shape_err(op, format!("filter expects {cin_f} input channels, input has {c}")));
        }
        let oh = win
            .output_extent(h)
            .ok_or_else(|| shape_err(op, format!("window {win:?} does not fit height {h}")))?;
        let ow = win
            .output_extent(w)
            .ok_or_else(|| shape_err(op, format!("window {win:?} does not fit width {w}")))?;
        Ok(ConvDims {
            batch: n,
            in_channels: c,
            out_channels: cout,
            in_h: h,
            in_w: w,
            out_h: oh,
            out_w: ow,
            depthwise,
        })
    }

    /// Dense convolution without bias. Filter layout `[out, in, k, k]`.
    pub fn conv2d(&mut self, x: NodeId, filt: NodeId, win: Window) -> Result<NodeId, AutodiffError> {
        let dims = self.conv_dims("conv2d", x, filt, &win, false)?;
        let mut out = vec![0.0; dims.batch * dims.out_channels * dims.out_h * dims.out_w];
        kernels::conv_forward(self.value(x).data(), self.value(filt).data(), &mut out, &dims, &win);
        let out = Tensor::from_parts(vec![dims.batch, dims.out_channels, dims.out_h, dims.out_w], out);
        Ok(self.push(Primitive::Conv2d(win), vec![x, filt], out, Saved::None))
    }

    /// Per-channel convolution. Filter layout `[channels, 1, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: NodeId, filt: NodeId, win: Window) -> Result<NodeId, AutodiffError> {
        let dims = self.conv_dims("depthwise_conv2d", x, filt, &win, true)?;
        let mut out = vec![0.0; dims.batch * dims.out_channels * dims.out_h * dims.out_w];
        kernels::conv_forward(self.value(x).data(), self.value(filt).data(), &mut out, &dims, &win);
        let out = Tensor::from_parts(vec![dims.batch, dims.out_channels, dims.out_h, dims.out_w], out);
        Ok(self.push(Primitive::DepthwiseConv2d(win), vec![x, filt], out, Saved::None))
    }

    fn pool_dims(&self, op: &'static str, x: NodeId, win: &Window) -> Result<PoolDims, AutodiffError> {
        let (n, c, h, w) = self.dims4(op, x)?;
        let oh = win
            .output_extent(h)
            .ok_or_else(|| shape_err(op, format!("window {win:?} does not fit height {h}")))?;
        let ow = win
            .output_extent(w)
            .ok_or_else(|| shape_err(op, format!("window {win:?} does not fit width {w}")))?;
        Ok(PoolDims {
            planes: n * c,
            in_h: h,
            in_w: w,
            out_h: oh,
            out_w: ow,
        })
    }

    pub fn max_pool(&mut self, x: NodeId, win: Window) -> Result<NodeId, AutodiffError> {
        let dims = self.pool_dims("max_pool", x, &win)?;
        let (n, c, _, _) = self.dims4("max_pool", x)?;
        let len = dims.planes * dims.out_h * dims.out_w;
        let mut out = vec![0.0; len];
        let mut argmax = vec![0u32; len];
        kernels::max_pool_forward(self.value(x).data(), &mut out, &mut argmax, &dims, &win);
        let out = Tensor::from_parts(vec![n, c, dims.out_h, dims.out_w], out);
        Ok(self.push(Primitive::MaxPool(win), vec![x], out, Saved::ArgMax(argmax)))
    }

    /// Average pooling; padded positions are excluded from the divisor.
    pub fn avg_pool(&mut self, x: NodeId, win: Window) -> Result<NodeId, AutodiffError> {
        let dims = self.pool_dims("avg_pool", x, &win)?;
        let (n, c, _, _) = self.dims4("avg_pool", x)?;
        let counts = kernels::avg_pool_counts(&dims, &win);
        let mut out = vec![0.0; dims.planes * dims.out_h * dims.out_w];
        kernels::avg_pool_forward(self.value(x).data(), &mut out, &counts, &dims, &win);
        let out = Tensor::from_parts(vec![n, c, dims.out_h, dims.out_w], out);
        Ok(self.push(Primitive::AvgPool(win), vec![x], out, Saved::Counts(counts)))
    }

    /// Keeps every `stride`-th row and column, starting at 0.
    pub fn subsample(&mut self, x: NodeId, stride: usize) -> Result<NodeId, AutodiffError> {
        let (n, c, h, w) = self.dims4("subsample", x)?;
        if stride == 0 {
            return Err(shape_err("subsample", "stride must be positive"));
        }
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for oy in 0..oh {
                let row = &src[p * h * w + oy * stride * w..][..w];
                out.extend((0..ow).map(|ox| row[ox * stride]));
            }
        }
        let out = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(Primitive::Subsample(stride), vec![x], out, Saved::None))
    }

    /// Zeros with the shape `x` would have after a stride-`stride` op.
    pub fn zero(&mut self, x: NodeId, stride: usize) -> Result<NodeId, AutodiffError> {
        let (n, c, h, w) = self.dims4("zero", x)?;
        if stride == 0 {
            return Err(shape_err("zero", "stride must be positive"));
        }
        let out = Tensor::zeros(&[n, c, h.div_ceil(stride), w.div_ceil(stride)]);
        Ok(self.push(Primitive::Zero, vec![x], out, Saved::None))
    }

    /// Drops the first `top` rows and `left` columns.
    pub fn crop(&mut self, x: NodeId, top: usize, left: usize) -> Result<NodeId, AutodiffError> {
        let (n, c, h, w) = self.dims4("crop", x)?;
        if top >= h || left >= w {
            return Err(shape_err("crop", format!("cannot crop ({top},{left}) from {h}x{w}")));
        }
        let (oh, ow) = (h - top, w - left);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for y in top..h {
                out.extend_from_slice(&src[p * h * w + y * w + left..][..ow]);
            }
        }
        let out = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(Primitive::Crop { top, left }, vec![x], out, Saved::None))
    }

    /// `y = x W^T + b` with `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, AutodiffError> {
        let (n, fin) = self
            .value(x)
            .dims2()
            .map_err(|_| shape_err("linear", format!("expected [n, in], got {:?}", self.value(x).shape())))?;
        let (fout, win) = self
            .value(weight)
            .dims2()
            .map_err(|_| shape_err("linear", format!("weight must be [out, in], got {:?}", self.value(weight).shape())))?;
        if win != fin || self.value(bias).shape() != [fout] {
            return Err(shape_err(
                "linear",
                format!(
                    "input [{n}, {fin}], weight {:?}, bias {:?}",
                    self.value(weight).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(weight).data(), self.value(bias).data());
        let mut out = vec![0.0; n * fout];
        for b in 0..n {
            let xrow = &xv[b * fin..][..fin];
            for o in 0..fout {
                out[b * fout + o] = bv[o] + kernels::dot(&wv[o * fin..][..fin], xrow);
            }
        }
        let out = Tensor::from_parts(vec![n, fout], out);
        Ok(self.push(Primitive::Linear, vec![x, weight, bias], out, Saved::None))
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let (n, c, h, w) = self.dims4("global_avg_pool", x)?;
        let plane = h * w;
        let src = self.value(x).data();
        let out: Vec<f64> = (0..n * c)
            .map(|p| src[p * plane..][..plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::from_parts(vec![n, c], out);
        Ok(self.push(Primitive::GlobalAvgPool, vec![x], out, Saved::None))
    }

    /// Softmax along the last axis of a rank-1 or rank-2 tensor.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.value(a).shape().to_vec();
        let cols = match shape[..] {
            [d] | [_, d] if d > 0 => d,
            _ => return Err(shape_err("softmax", format!("expected rank 1 or 2, got {shape:?}"))),
        };
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(Primitive::SoftmaxRows, vec![a], out, Saved::None))
    }

    /// `Σ_k weights[row, k] · xs[k]`, the mixing step of a mixed operation.
    pub fn weighted_sum(&mut self, weights: NodeId, row: usize, xs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let wshape = self.value(weights).shape();
        let cols = *wshape.last().unwrap_or(&0);
        let rows = if wshape.len() == 2 { wshape[0] } else { 1 };
        if cols != xs.len() || row >= rows {
            return Err(shape_err(
                "scalar_weighted_sum",
                format!("weights {wshape:?} row {row} for {} candidates", xs.len()),
            ));
        }
        let first = self.value(xs[0]).shape().to_vec();
        if let Some(bad) = xs.iter().find(|&&x| self.value(x).shape() != first.as_slice()) {
            return Err(shape_err(
                "scalar_weighted_sum",
                format!("candidate shapes {:?} and {:?} differ", first, self.value(*bad).shape()),
            ));
        }
        let wrow = &self.value(weights).data()[row * cols..][..cols];
        let mut out = vec![0.0; first.iter().product()];
        for (k, &x) in xs.iter().enumerate() {
            let p = wrow[k];
            for (o, v) in out.iter_mut().zip(self.value(x).data()) {
                *o += p * v;
            }
        }
        let mut inputs = Vec::with_capacity(xs.len() + 1);
        inputs.push(weights);
        inputs.extend_from_slice(xs);
        let out = Tensor::from_parts(first, out);
        Ok(self.push(Primitive::WeightedSum { row }, inputs, out, Saved::None))
    }

    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if xs.is_empty() {
            return Err(shape_err("concat_channels", "no inputs"));
        }
        let (n, _, h, w) = self.dims4("concat_channels", xs[0])?;
        let mut total = 0;
        for &x in xs {
            let (xn, xc, xh, xw) = self.dims4("concat_channels", x)?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(shape_err(
                    "concat_channels",
                    format!(
                        "inputs {:?} and {:?} disagree outside the channel axis",
                        self.value(xs[0]).shape(),
                        self.value(x).shape()
                    ),
                ));
            }
            total += xc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &x in xs {
                let c = self.value(x).shape()[1];
                out.extend_from_slice(&self.value(x).data()[b * c * plane..][..c * plane]);
            }
        }
        let out = Tensor::from_parts(vec![n, total, h, w], out);
        Ok(self.push(Primitive::ConcatChannels, xs.to_vec(), out, Saved::None))
    }

    pub fn add(&mut self, xs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let Some(&first) = xs.first() else {
            return Err(shape_err("add", "no inputs"));
        };
        let mut out = self.value(first).clone();
        for &x in &xs[1..] {
            if self.value(x).shape() != out.shape() {
                return Err(shape_err("add", format!("{:?} vs {:?}", out.shape(), self.value(x).shape())));
            }
            out.add_assign(self.value(x));
        }
        Ok(self.push(Primitive::Add, xs.to_vec(), out, Saved::None))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        Ok(self.push(Primitive::Mul, vec![a, b], out, Saved::None))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Primitive::Sum, vec![x], out, Saved::None)
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, AutodiffError> {
        let (n, classes) = self.value(logits).dims2().map_err(|_| {
            shape_err(
                "softmax_cross_entropy",
                format!("expected [n, classes], got {:?}", self.value(logits).shape()),
            )
        })?;
        if labels.len() != n || n == 0 {
            return Err(shape_err("softmax_cross_entropy", format!("{n} rows but {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(AutodiffError::Label { label, classes });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        let out = Tensor::scalar(loss / n as f64);
        let saved = Saved::CrossEntropy {
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(Primitive::SoftmaxCrossEntropy, vec![logits], out, saved))
    }

    /// Reverse pass from a scalar `loss`. Returns one gradient per parameter of
    /// the selected sections; parameters not reachable from `loss` get zeros.
    pub fn backward(&self, loss: NodeId, store: &ParamStore, wrt: SectionFilter) -> Result<Gradients, AutodiffError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        if !loss_value.data()[0].is_finite() {
            return Err(AutodiffError::NonFinite {
                what: format!("loss value {}", loss_value.data()[0]),
            });
        }

        // needed[i]: node i lies on a path from a selected parameter
        let mut needed = vec![false; loss.0 + 1];
        for i in 0..=loss.0 {
            let node = &self.nodes[i];
            needed[i] = match node.prim {
                Primitive::Param(pid) => wrt.accepts(store.section(pid)?),
                Primitive::Input | Primitive::Zero => false,
                _ => node.inputs.iter().any(|inp| needed[inp.0]),
            };
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        let mut out = Gradients::new();
        for i in (0..=loss.0).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Primitive::Param(pid) = self.nodes[i].prim {
                out.accumulate(pid, g);
                continue;
            }
            self.node_backward(NodeId(i), &g, &needed, &mut grads)?;
        }

        for (pid, entry) in store.iter() {
            if wrt.accepts(entry.section) && out.get(pid).is_none() {
                out.insert(pid, Tensor::zeros(entry.value.shape()));
            }
        }
        Ok(out)
    }

    fn node_backward(&self, id: NodeId, g: &Tensor, needed: &[bool], grads: &mut [Option<Tensor>]) -> Result<(), AutodiffError> {
        let node = &self.nodes[id.0];
        let gd = g.data();
        let want = |i: usize| needed[node.inputs[i].0];
        match &node.prim {
            Primitive::Input | Primitive::Param(_) | Primitive::Zero => {}
            Primitive::Relu => {
                let dx = slot(grads, node.inputs[0], node.value.shape());
                for ((d, gv), y) in dx.data_mut().iter_mut().zip(gd).zip(node.value.data()) {
                    if *y > 0.0 {
                        *d += gv;
                    }
                }
            }
            Primitive::BatchNorm => {
                let Saved::InvStd(inv_std) = &node.saved else { unreachable!() };
                let (n, c, h, w) = node.value.dims4()?;
                let dx = slot(grads, node.inputs[0], node.value.shape());
                kernels::batch_norm_backward(gd, node.value.data(), inv_std, dx.data_mut(), n, c, h * w);
            }
            Primitive::Conv2d(win) | Primitive::DepthwiseConv2d(win) => {
                let depthwise = matches!(node.prim, Primitive::DepthwiseConv2d(_));
                let (x, f) = (node.inputs[0], node.inputs[1]);
                let dims = self.conv_dims("conv_backward", x, f, win, depthwise)?;
                if want(0) {
                    let shape = self.value(x).shape().to_vec();
                    let fv = self.value(f).data();
                    let dx = slot(grads, x, &shape);
                    kernels::conv_backward_input(gd, fv, dx.data_mut(), &dims, win);
                }
                if want(1) {
                    let shape = self.value(f).shape().to_vec();
                    let xv = self.value(x).data();
                    let df = slot(grads, f, &shape);
                    kernels::conv_backward_filter(xv, gd, df.data_mut(), &dims, win);
                }
            }
            Primitive::MaxPool(win) => {
                let Saved::ArgMax(argmax) = &node.saved else { unreachable!() };
                let x = node.inputs[0];
                let dims = self.pool_dims("max_pool_backward", x, win)?;
                let shape = self.value(x).shape().to_vec();
                kernels::max_pool_backward(gd, argmax, slot(grads, x, &shape).data_mut(), &dims);
            }
            Primitive::AvgPool(win) => {
                let Saved::Counts(counts) = &node.saved else { unreachable!() };
                let x = node.inputs[0];
                let dims = self.pool_dims("avg_pool_backward", x, win)?;
                let shape = self.value(x).shape().to_vec();
                kernels::avg_pool_backward(gd, slot(grads, x, &shape).data_mut(), counts, &dims, win);
            }
            Primitive::Subsample(stride) => {
                let x = node.inputs[0];
                let (n, c, h, w) = self.value(x).dims4()?;
                let (_, _, oh, ow) = node.value.dims4()?;
                let shape = self.value(x).shape().to_vec();
                let dx = slot(grads, x, &shape).data_mut();
                for p in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dx[p * h * w + oy * stride * w + ox * stride] += gd[(p * oh + oy) * ow + ox];
                        }
                    }
                }
            }
            Primitive::Crop { top, left } => {
                let x = node.inputs[0];
                let (n, c, h, w) = self.value(x).dims4()?;
                let (oh, ow) = (h - top, w - left);
                let shape = self.value(x).shape().to_vec();
                let dx = slot(grads, x, &shape).data_mut();
                for p in 0..n * c {
                    for y in 0..oh {
                        let dst = &mut dx[p * h * w + (y + top) * w + left..][..ow];
                        for (d, gv) in dst.iter_mut().zip(&gd[(p * oh + y) * ow..][..ow]) {
                            *d += gv;
                        }
                    }
                }
            }
            Primitive::Linear => {
                let (x, wt, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                let (n, fin) = self.value(x).dims2()?;
                let fout = node.value.shape()[1];
                if want(0) {
                    let wv = self.value(wt).data();
                    let dx = slot(grads, x, &[n, fin]).data_mut();
                    for r in 0..n {
                        for o in 0..fout {
                            let gv = gd[r * fout + o];
                            for (d, w) in dx[r * fin..][..fin].iter_mut().zip(&wv[o * fin..][..fin]) {
                                *d += gv * w;
                            }
                        }
                    }
                }
                if want(1) {
                    let xv = self.value(x).data();
                    let dw = slot(grads, wt, &[fout, fin]).data_mut();
                    for r in 0..n {
                        for o in 0..fout {
                            let gv = gd[r * fout + o];
                            for (d, xx) in dw[o * fin..][..fin].iter_mut().zip(&xv[r * fin..][..fin]) {
                                *d += gv * xx;
                            }
                        }
                    }
                }
                if want(2) {
                    let db = slot(grads, b, &[fout]).data_mut();
                    for r in 0..n {
                        for o in 0..fout {
                            db[o] += gd[r * fout + o];
                        }
                    }
                }
            }
            Primitive::GlobalAvgPool => {
                let x = node.inputs[0];
                let (n, c, h, w) = self.value(x).dims4()?;
                let plane = h * w;
                let shape = self.value(x).shape().to_vec();
                let dx = slot(grads, x, &shape).data_mut();
                for p in 0..n * c {
                    let gv = gd[p] / plane as f64;
                    for d in &mut dx[p * plane..][..plane] {
                        *d += gv;
                    }
                }
            }
            Primitive::SoftmaxRows => {
                let shape = node.value.shape().to_vec();
                let cols = *shape.last().expect("rank checked in forward");
                let da = slot(grads, node.inputs[0], &shape).data_mut();
                for ((prow, grow), drow) in node.value.data().chunks(cols).zip(gd.chunks(cols)).zip(da.chunks_mut(cols)) {
                    let inner: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                    for ((d, p), g) in drow.iter_mut().zip(prow).zip(grow) {
                        *d += p * (g - inner);
                    }
                }
            }
            Primitive::WeightedSum { row } => {
                let weights = node.inputs[0];
                let wshape = self.value(weights).shape().to_vec();
                let cols = *wshape.last().expect("checked in forward");
                let wrow: Vec<f64> = self.value(weights).data()[row * cols..][..cols].to_vec();
                for (k, &wk) in wrow.iter().enumerate() {
                    if !want(k + 1) {
                        continue;
                    }
                    let x = node.inputs[k + 1];
                    let dx = slot(grads, x, node.value.shape()).data_mut();
                    for (d, gv) in dx.iter_mut().zip(gd) {
                        *d += wk * gv;
                    }
                }
                if want(0) {
                    let contributions: Vec<f64> = (0..cols).map(|k| kernels::dot(self.value(node.inputs[k + 1]).data(), gd)).collect();
                    let dw = slot(grads, weights, &wshape).data_mut();
                    for (k, v) in contributions.into_iter().enumerate() {
                        dw[row * cols + k] += v;
                    }
                }
            }
            Primitive::ConcatChannels => {
                let (n, total, h, w) = node.value.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for (i, &x) in node.inputs.iter().enumerate() {
                    let c = self.value(x).shape()[1];
                    if want(i) {
                        let shape = self.value(x).shape().to_vec();
                        let dx = slot(grads, x, &shape).data_mut();
                        for b in 0..n {
                            let src = &gd[(b * total + offset) * plane..][..c * plane];
                            for (d, gv) in dx[b * c * plane..][..c * plane].iter_mut().zip(src) {
                                *d += gv;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Primitive::Add => {
                for (i, &x) in node.inputs.iter().enumerate() {
                    if want(i) {
                        slot(grads, x, node.value.shape()).add_assign(g);
                    }
                }
            }
            Primitive::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                for (dst, other, i) in [(a, b, 0), (b, a, 1)] {
                    if want(i) {
                        let ov = self.value(other).data().to_vec();
                        let d = slot(grads, dst, node.value.shape()).data_mut();
                        for ((dv, gv), o) in d.iter_mut().zip(gd).zip(&ov) {
                            *dv += gv * o;
                        }
                    }
                }
            }
            Primitive::Sum => {
                let x = node.inputs[0];
                let gv = gd[0];
                let shape = self.value(x).shape().to_vec();
                for d in slot(grads, x, &shape).data_mut() {
                    *d += gv;
                }
            }
            Primitive::SoftmaxCrossEntropy => {
                let Saved::CrossEntropy { probs, labels } = &node.saved else {
                    unreachable!()
                };
                let x = node.inputs[0];
                let shape = self.value(x).shape().to_vec();
                let (n, classes) = (shape[0], shape[1]);
                let scale = gd[0] / n as f64;
                let dx = slot(grads, x, &shape).data_mut();
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..classes {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        dx[r * classes + j] += scale * (probs[r * classes + j] - onehot);
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'a mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
