//! Slice-level forward/backward kernels for the spatial ops.
//!
//! All loops run in a fixed order so that every kernel is bit-reproducible.
//! Inner loops are written as contiguous `axpy`/`dot` over rows so that the
//! compiler can vectorize them without reassociating reductions.

/// Geometry of a 2-D convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Window {
    pub const fn new(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            dilation,
        }
    }

    /// Output extent along one axis, or `None` when the window does not fit.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    /// Offset of tap `k` relative to `out * stride`.
    fn tap_offset(&self, k: usize) -> isize {
        (k * self.dilation) as isize - self.padding as isize
    }
}

/// Range of output positions `o` for which `o * stride + offset` lands in `[0, input)`.
fn valid_range(outputs: usize, stride: usize, offset: isize, input: usize) -> (usize, usize) {
    let s = stride as isize;
    // smallest o with o*s + offset >= 0
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    // largest o with o*s + offset <= input - 1
    let last = input as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo as usize).min(outputs);
    let hi = (hi as usize).min(outputs);
    (lo, hi.max(lo))
}

/// Dot product with four interleaved accumulators (fixed order, vectorizable).
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Shapes for a convolution call. `depthwise` means one filter per channel.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub depthwise: bool,
}

impl ConvDims {
    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }
    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
    /// Input channels read by output channel `co`.
    fn inputs_of(&self, co: usize) -> std::ops::Range<usize> {
        if self.depthwise {
            co..co + 1
        } else {
            0..self.in_channels
        }
    }
    fn filter_offset(&self, co: usize, ci: usize, kk: usize) -> usize {
        if self.depthwise {
            co * kk
        } else {
            (co * self.in_channels + ci) * kk
        }
    }
    fn is_pointwise(&self, win: &Window) -> bool {
        win.kernel == 1 && win.stride == 1 && win.padding == 0
    }
}

/// `c += a * b` for row-major `a: m x k`, `b: k x n`, `c: m x n`.
/// Each output sums its `k` products in ascending order.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 8;
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let brow: &[f64; NR] = b[p * n + j..][..NR].try_into().unwrap();
                for r in 0..MR {
                    let av = a[(i + r) * k + p];
                    for l in 0..NR {
                        acc[r][l] += av * brow[l];
                    }
                }
            }
            for r in 0..MR {
                for (cv, v) in c[(i + r) * n + j..][..NR].iter_mut().zip(&acc[r]) {
                    *cv += v;
                }
            }
            j += NR;
        }
        for r in i..i + MR {
            for jj in j..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[r * k + p] * b[p * n + jj];
                }
                c[r * n + jj] += s;
            }
        }
        i += MR;
    }
    for r in i..m {
        for jj in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[r * k + p] * b[p * n + jj];
            }
            c[r * n + jj] += s;
        }
    }
}

/// `out[q] += Σ_t w[t] * src[q + off[t]]` for `q < out.len()`, taps summed in order.
fn correlate(src: &[f64], taps: &[(f64, usize)], out: &mut [f64]) {
    const L: usize = 8;
    let len = out.len();
    let mut q = 0;
    while q + L <= len {
        let mut acc = [0.0f64; L];
        for &(w, off) in taps {
            let s: &[f64; L] = src[q + off..][..L].try_into().unwrap();
            for l in 0..L {
                acc[l] += w * s[l];
            }
        }
        for (o, v) in out[q..q + L].iter_mut().zip(&acc) {
            *o += v;
        }
        q += L;
    }
    for qq in q..len {
        let mut acc = 0.0;
        for &(w, off) in taps {
            acc += w * src[qq + off];
        }
        out[qq] += acc;
    }
}

/// Padded-plane layout for one conv call. With the input zero-padded to
/// `hp x wp`, tap `t` of output `(oy, ox)` reads padded index
/// `oy*stride*wp + ox*stride + offset_t`, so stride-1 taps become contiguous
/// runs over an output buffer laid out with row pitch `wp`.
struct Plan {
    hp: usize,
    wp: usize,
    /// `(filter tap index, padded offset)` for taps that touch real input.
    taps: Vec<(usize, usize)>,
    /// Length of a stride-1 output run with row pitch `wp`.
    run: usize,
    /// Largest tap offset.
    reach: usize,
}

impl Plan {
    fn new(dims: &ConvDims, win: &Window) -> Self {
        let (hp, wp) = (dims.in_h + 2 * win.padding, dims.in_w + 2 * win.padding);
        let mut taps = Vec::with_capacity(win.kernel * win.kernel);
        for ky in 0..win.kernel {
            let (ylo, yhi) = valid_range(dims.out_h, win.stride, win.tap_offset(ky), dims.in_h);
            for kx in 0..win.kernel {
                let (xlo, xhi) = valid_range(dims.out_w, win.stride, win.tap_offset(kx), dims.in_w);
                if ylo < yhi && xlo < xhi {
                    taps.push((ky * win.kernel + kx, ky * win.dilation * wp + kx * win.dilation));
                }
            }
        }
        let run = (dims.out_h - 1) * wp + dims.out_w;
        let reach = taps.iter().map(|t| t.1).max().unwrap_or(0);
        Self { hp, wp, taps, run, reach }
    }

    fn plane(&self) -> usize {
        self.hp * self.wp
    }

    fn weighted(&self, f: &[f64]) -> Vec<(f64, usize)> {
        self.taps.iter().map(|&(t, off)| (f[t], off)).collect()
    }

    /// Taps of the transposed correlation over a gradient buffer that has
    /// `reach` leading zeros.
    fn mirrored(&self, f: &[f64]) -> Vec<(f64, usize)> {
        self.taps.iter().map(|&(t, off)| (f[t], self.reach - off)).collect()
    }
}

/// Copies every input plane of batch item `b` into `pad` with a zero border.
fn pad_batch_item(x: &[f64], b: usize, dims: &ConvDims, padding: usize, plan: &Plan, pad: &mut [f64]) {
    let (ip, pp) = (dims.in_plane(), plan.plane());
    pad.fill(0.0);
    for ci in 0..dims.in_channels {
        let src = &x[(b * dims.in_channels + ci) * ip..][..ip];
        let dst = &mut pad[ci * pp..][..pp];
        for y in 0..dims.in_h {
            dst[(y + padding) * plan.wp + padding..][..dims.in_w].copy_from_slice(&src[y * dims.in_w..][..dims.in_w]);
        }
    }
}

/// Spreads an output-gradient plane onto row pitch `wp` starting at `lead`,
/// with zeros everywhere else.
fn widen(g: &[f64], dims: &ConvDims, plan: &Plan, lead: usize, ext: &mut [f64]) {
    ext.fill(0.0);
    for oy in 0..dims.out_h {
        ext[lead + oy * plan.wp..][..dims.out_w].copy_from_slice(&g[oy * dims.out_w..][..dims.out_w]);
    }
}

fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = src[r * cols + c];
        }
    }
    t
}

pub fn conv_forward(x: &[f64], filt: &[f64], out: &mut [f64], dims: &ConvDims, win: &Window) {
    let kk = win.kernel * win.kernel;
    let (ip, op) = (dims.in_plane(), dims.out_plane());
    let (cin, cout) = (dims.in_channels, dims.out_channels);
    if dims.is_pointwise(win) && !dims.depthwise {
        for b in 0..dims.batch {
            gemm_acc(
                filt,
                &x[b * cin * ip..][..cin * ip],
                &mut out[b * cout * op..][..cout * op],
                cout,
                cin,
                ip,
            );
        }
        return;
    }
    let plan = Plan::new(dims, win);
    let pp = plan.plane();
    let mut pad = vec![0.0; cin * pp];
    let mut ext = vec![0.0; plan.run];
    let s = win.stride;
    for b in 0..dims.batch {
        pad_batch_item(x, b, dims, win.padding, &plan, &mut pad);
        for co in 0..cout {
            let oplane = &mut out[(b * cout + co) * op..][..op];
            if s == 1 {
                ext.fill(0.0);
            }
            for ci in dims.inputs_of(co) {
                let pplane = &pad[ci * pp..][..pp];
                let f = &filt[dims.filter_offset(co, ci, kk)..][..kk];
                if s == 1 {
                    correlate(pplane, &plan.weighted(f), &mut ext);
                    continue;
                }
                for &(t, off) in &plan.taps {
                    for oy in 0..dims.out_h {
                        let prow = &pplane[oy * s * plan.wp + off..];
                        let orow = &mut oplane[oy * dims.out_w..][..dims.out_w];
                        for (o, v) in orow.iter_mut().zip(prow.iter().step_by(s)) {
                            *o += f[t] * v;
                        }
                    }
                }
            }
            if s == 1 {
                for oy in 0..dims.out_h {
                    let orow = &mut oplane[oy * dims.out_w..][..dims.out_w];
                    for (o, v) in orow.iter_mut().zip(&ext[oy * plan.wp..]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the input, accumulated into `dx`.
pub fn conv_backward_input(dy: &[f64], filt: &[f64], dx: &mut [f64], dims: &ConvDims, win: &Window) {
    let kk = win.kernel * win.kernel;
    let (ip, op) = (dims.in_plane(), dims.out_plane());
    let (cin, cout) = (dims.in_channels, dims.out_channels);
    if dims.is_pointwise(win) && !dims.depthwise {
        let ft = transpose(filt, cout, cin);
        for b in 0..dims.batch {
            gemm_acc(
                &ft,
                &dy[b * cout * op..][..cout * op],
                &mut dx[b * cin * ip..][..cin * ip],
                cin,
                cout,
                op,
            );
        }
        return;
    }
    let plan = Plan::new(dims, win);
    let pp = plan.plane();
    let mut dpad = vec![0.0; cin * pp];
    let s = win.stride;
    // gradient planes on pitch wp with `reach` leading zeros, for the stride-1 gather
    let glen = plan.reach + pp;
    let mut gbuf = if s == 1 { vec![0.0; cout * glen] } else { Vec::new() };
    for b in 0..dims.batch {
        dpad.fill(0.0);
        if s == 1 {
            for co in 0..cout {
                let gplane = &dy[(b * cout + co) * op..][..op];
                widen(gplane, dims, &plan, plan.reach, &mut gbuf[co * glen..][..glen]);
            }
        }
        for co in 0..cout {
            let gplane = &dy[(b * cout + co) * op..][..op];
            for ci in dims.inputs_of(co) {
                let dplane = &mut dpad[ci * pp..][..pp];
                let f = &filt[dims.filter_offset(co, ci, kk)..][..kk];
                if s == 1 {
                    correlate(&gbuf[co * glen..][..glen], &plan.mirrored(f), dplane);
                    continue;
                }
                for &(t, off) in &plan.taps {
                    for oy in 0..dims.out_h {
                        let drow = &mut dplane[oy * s * plan.wp + off..];
                        let grow = &gplane[oy * dims.out_w..][..dims.out_w];
                        for (d, g) in drow.iter_mut().step_by(s).zip(grow) {
                            *d += f[t] * g;
                        }
                    }
                }
            }
        }
        for ci in 0..cin {
            let dplane = &dpad[ci * pp..][..pp];
            let dst = &mut dx[(b * cin + ci) * ip..][..ip];
            for y in 0..dims.in_h {
                let src = &dplane[(y + win.padding) * plan.wp + win.padding..][..dims.in_w];
                for (d, v) in dst[y * dims.in_w..][..dims.in_w].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
    }
}

/// Gradient with respect to the filter, accumulated into `dfilt`.
pub fn conv_backward_filter(x: &[f64], dy: &[f64], dfilt: &mut [f64], dims: &ConvDims, win: &Window) {
    let kk = win.kernel * win.kernel;
    let (ip, op) = (dims.in_plane(), dims.out_plane());
    let (cin, cout) = (dims.in_channels, dims.out_channels);
    if dims.is_pointwise(win) && !dims.depthwise {
        for b in 0..dims.batch {
            let xt = transpose(&x[b * cin * ip..][..cin * ip], cin, ip);
            gemm_acc(&dy[b * cout * op..][..cout * op], &xt, dfilt, cout, op, cin);
        }
        return;
    }
    let plan = Plan::new(dims, win);
    let pp = plan.plane();
    let mut pad = vec![0.0; cin * pp];
    let mut ext = vec![0.0; plan.run];
    let s = win.stride;
    for b in 0..dims.batch {
        pad_batch_item(x, b, dims, win.padding, &plan, &mut pad);
        for co in 0..cout {
            let gplane = &dy[(b * cout + co) * op..][..op];
            if s == 1 {
                widen(gplane, dims, &plan, 0, &mut ext);
            }
            for ci in dims.inputs_of(co) {
                let pplane = &pad[ci * pp..][..pp];
                let base = dims.filter_offset(co, ci, kk);
                for &(t, off) in &plan.taps {
                    let acc = if s == 1 {
                        dot(&ext, &pplane[off..off + plan.run])
                    } else {
                        let mut acc = 0.0;
                        for oy in 0..dims.out_h {
                            let prow = &pplane[oy * s * plan.wp + off..];
                            acc += dot_strided(&gplane[oy * dims.out_w..][..dims.out_w], prow, s);
                        }
                        acc
                    };
                    dfilt[base + t] += acc;
                }
            }
        }
    }
}

#[inline]
fn dot_strided(a: &[f64], b: &[f64], stride: usize) -> f64 {
    a.iter().zip(b.iter().step_by(stride)).map(|(x, y)| x * y).sum()
}

/// Shapes for a pooling call (channels preserved).
#[derive(Debug, Clone, Copy)]
pub struct PoolDims {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Copies one plane into a `(h + 2p) x (w + 2p)` buffer whose border is `fill`.
fn pad_plane(src: &[f64], h: usize, w: usize, p: usize, fill: f64, dst: &mut [f64]) {
    let wp = w + 2 * p;
    dst.fill(fill);
    for y in 0..h {
        dst[(y + p) * wp + p..][..w].copy_from_slice(&src[y * w..][..w]);
    }
}

/// Max pooling; returns, per output element, the flat in-plane index of the
/// first maximal input in scan order.
pub fn max_pool_forward(x: &[f64], out: &mut [f64], argmax: &mut [u32], dims: &PoolDims, win: &Window) {
    let (ip, op) = (dims.in_h * dims.in_w, dims.out_h * dims.out_w);
    let p = win.padding;
    let (hp, wp) = (dims.in_h + 2 * p, dims.in_w + 2 * p);
    let mut pad = vec![0.0; hp * wp];
    let mut best = vec![0.0; dims.out_w];
    // padded index of the winning tap, converted to an in-plane index at the end
    let mut best_pix = vec![0usize; dims.out_w];
    let s = win.stride;
    for plane in 0..dims.planes {
        pad_plane(&x[plane * ip..][..ip], dims.in_h, dims.in_w, p, f64::NEG_INFINITY, &mut pad);
        for oy in 0..dims.out_h {
            best.fill(f64::NEG_INFINITY);
            best_pix.fill(usize::MAX);
            for ky in 0..win.kernel {
                let row = oy * s + ky * win.dilation;
                for kx in 0..win.kernel {
                    let start = row * wp + kx * win.dilation;
                    if s == 1 {
                        let src_row = &pad[start..start + dims.out_w];
                        for (ox, ((b, bp), &v)) in best.iter_mut().zip(best_pix.iter_mut()).zip(src_row).enumerate() {
                            let take = v > *b;
                            *b = if take { v } else { *b };
                            *bp = if take { start + ox } else { *bp };
                        }
                        continue;
                    }
                    for (ox, v) in pad[start..].iter().step_by(s).take(dims.out_w).enumerate() {
                        if *v > best[ox] {
                            best[ox] = *v;
                            best_pix[ox] = start + ox * s;
                        }
                    }
                }
            }
            let o = plane * op + oy * dims.out_w;
            out[o..o + dims.out_w].copy_from_slice(&best);
            for (a, &pix) in argmax[o..o + dims.out_w].iter_mut().zip(&best_pix) {
                let (py, px) = (pix / wp, pix % wp);
                *a = ((py - p) * dims.in_w + (px - p)) as u32;
            }
        }
    }
}

pub fn max_pool_backward(dy: &[f64], argmax: &[u32], dx: &mut [f64], dims: &PoolDims) {
    let (ip, op) = (dims.in_h * dims.in_w, dims.out_h * dims.out_w);
    for p in 0..dims.planes {
        for o in 0..op {
            dx[p * ip + argmax[p * op + o] as usize] += dy[p * op + o];
        }
    }
}

/// Number of in-bounds taps for every output position (average pooling
/// excludes padding from the divisor).
pub fn avg_pool_counts(dims: &PoolDims, win: &Window) -> Vec<f64> {
    let mut counts = vec![0.0; dims.out_h * dims.out_w];
    for ky in 0..win.kernel {
        let (ylo, yhi) = valid_range(dims.out_h, win.stride, win.tap_offset(ky), dims.in_h);
        for kx in 0..win.kernel {
            let (xlo, xhi) = valid_range(dims.out_w, win.stride, win.tap_offset(kx), dims.in_w);
            for oy in ylo..yhi {
                for ox in xlo..xhi {
                    counts[oy * dims.out_w + ox] += 1.0;
                }
            }
        }
    }
    counts
}

pub fn avg_pool_forward(x: &[f64], out: &mut [f64], counts: &[f64], dims: &PoolDims, win: &Window) {
    let (ip, op) = (dims.in_h * dims.in_w, dims.out_h * dims.out_w);
    let p = win.padding;
    let (hp, wp) = (dims.in_h + 2 * p, dims.in_w + 2 * p);
    let mut pad = vec![0.0; hp * wp];
    let s = win.stride;
    for plane in 0..dims.planes {
        pad_plane(&x[plane * ip..][..ip], dims.in_h, dims.in_w, p, 0.0, &mut pad);
        let oplane = &mut out[plane * op..][..op];
        for oy in 0..dims.out_h {
            let orow = &mut oplane[oy * dims.out_w..][..dims.out_w];
            for ky in 0..win.kernel {
                let row = oy * s + ky * win.dilation;
                for kx in 0..win.kernel {
                    let start = row * wp + kx * win.dilation;
                    for (o, v) in orow.iter_mut().zip(pad[start..].iter().step_by(s)) {
                        *o += v;
                    }
                }
            }
        }
        for (o, c) in oplane.iter_mut().zip(counts) {
            *o /= c;
        }
    }
}

pub fn avg_pool_backward(dy: &[f64], dx: &mut [f64], counts: &[f64], dims: &PoolDims, win: &Window) {
    let (ip, op) = (dims.in_h * dims.in_w, dims.out_h * dims.out_w);
    let p = win.padding;
    let (hp, wp) = (dims.in_h + 2 * p, dims.in_w + 2 * p);
    let mut dpad = vec![0.0; hp * wp];
    let mut scaled = vec![0.0; op];
    let s = win.stride;
    for plane in 0..dims.planes {
        for ((sc, g), c) in scaled.iter_mut().zip(&dy[plane * op..][..op]).zip(counts) {
            *sc = g / c;
        }
        dpad.fill(0.0);
        for oy in 0..dims.out_h {
            let grow = &scaled[oy * dims.out_w..][..dims.out_w];
            for ky in 0..win.kernel {
                let row = oy * s + ky * win.dilation;
                for kx in 0..win.kernel {
                    let start = row * wp + kx * win.dilation;
                    for (d, g) in dpad[start..].iter_mut().step_by(s).zip(grow) {
                        *d += g;
                    }
                }
            }
        }
        let dplane = &mut dx[plane * ip..][..ip];
        for y in 0..dims.in_h {
            for (d, v) in dplane[y * dims.in_w..][..dims.in_w].iter_mut().zip(&dpad[(y + p) * wp + p..]) {
                *d += v;
            }
        }
    }
}

/// Batch normalization with batch statistics and no affine transform.
/// Writes the normalized output and returns the per-channel inverse std.
pub fn batch_norm_forward(x: &[f64], out: &mut [f64], batch: usize, channels: usize, plane: usize, eps: f64) -> Vec<f64> {
    let m = (batch * plane) as f64;
    let mut inv_std = vec![0.0; channels];
    for c in 0..channels {
        let mut sum = 0.0;
        for b in 0..batch {
            sum += x[(b * channels + c) * plane..][..plane].iter().sum::<f64>();
        }
        let mean = sum / m;
        let mut sq = 0.0;
        for b in 0..batch {
            sq += x[(b * channels + c) * plane..][..plane]
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>();
        }
        let istd = 1.0 / (sq / m + eps).sqrt();
        inv_std[c] = istd;
        for b in 0..batch {
            let off = (b * channels + c) * plane;
            for (o, v) in out[off..off + plane].iter_mut().zip(&x[off..off + plane]) {
                *o = (v - mean) * istd;
            }
        }
    }
    inv_std
}

/// `dx += istd/m * (m*dy - sum(dy) - xhat*sum(dy*xhat))` per channel.
pub fn batch_norm_backward(dy: &[f64], xhat: &[f64], inv_std: &[f64], dx: &mut [f64], batch: usize, channels: usize, plane: usize) {
    let m = (batch * plane) as f64;
    for (c, &istd) in inv_std.iter().enumerate().take(channels) {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * plane;
            sum_dy += dy[off..off + plane].iter().sum::<f64>();
            sum_dy_xhat += dot(&dy[off..off + plane], &xhat[off..off + plane]);
        }
        let k = istd / m;
        for b in 0..batch {
            let off = (b * channels + c) * plane;
            for i in off..off + plane {
                dx[i] += k * (m * dy[i] - sum_dy - xhat[i] * sum_dy_xhat);
            }
        }
    }
}
