//! Forward kernels and vector-Jacobian products for every primitive.

use crate::scalar::{gemm, Scalar};

use super::{AutodiffError, Tensor};

/// The primitive that produced a node.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind<T> {
    /// Differentiable input (parameter or probe point).
    Leaf,
    /// Input that never receives a gradient.
    Constant,
    Add,
    Sub,
    Mul,
    /// `a ⊙ b` where `b` has a single channel broadcast over `a`'s channels.
    MulChannel,
    /// Multiplication by a one-element node.
    ScaleBy,
    /// Multiplication by a constant.
    Scale(T),
    /// Addition of a constant.
    Shift(T),
    Matmul,
    /// Stride-1, zero "same" padding; inputs are `[x, weight, bias]`.
    Conv2d,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Clamp(T, T),
    Sum,
    Mean,
    MaxPool(usize),
    AvgPool(usize),
    Upsample(usize),
    ConcatChannels,
    SliceChannels {
        start: usize,
        len: usize,
    },
}

impl<T> OpKind<T> {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MulChannel => "mul_channel",
            OpKind::ScaleBy => "scale_by",
            OpKind::Scale(_) => "scale",
            OpKind::Shift(_) => "shift",
            OpKind::Matmul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Clamp(..) => "clamp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MaxPool(_) => "max_pool",
            OpKind::AvgPool(_) => "avg_pool",
            OpKind::Upsample(_) => "upsample_nearest",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::SliceChannels { .. } => "slice_channels",
        }
    }
}

fn mismatch<T: Scalar>(op: &OpKind<T>, a: &Tensor<T>, b: &Tensor<T>) -> AutodiffError {
    AutodiffError::ShapeMismatch { op: op.name(), lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn invalid<T: Scalar>(op: &OpKind<T>, t: &Tensor<T>, reason: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidShape { op: op.name(), shape: t.shape().to_vec(), reason: reason.into() }
}

fn require4<T: Scalar>(op: &OpKind<T>, t: &Tensor<T>) -> Result<(usize, usize, usize, usize), AutodiffError> {
    t.dims4().ok_or_else(|| invalid(op, t, "expected [batch, channels, height, width]"))
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Evaluates `op` on `inputs`, validating shapes.
pub(crate) fn forward<T: Scalar>(op: &OpKind<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, AutodiffError> {
    let arity_ok = match op {
        OpKind::Leaf | OpKind::Constant => inputs.is_empty(),
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MulChannel | OpKind::ScaleBy | OpKind::Matmul => {
            inputs.len() == 2
        }
        OpKind::Conv2d => inputs.len() == 3,
        OpKind::ConcatChannels => !inputs.is_empty(),
        _ => inputs.len() == 1,
    };
    if !arity_ok {
        return Err(AutodiffError::Arity { op: op.name(), got: inputs.len() });
    }
    match op {
        OpKind::Leaf | OpKind::Constant => unreachable!("leaves are not evaluated"),
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op, a, b));
            }
            Ok(match op {
                OpKind::Add => a.zip_map(b, |x, y| x + y),
                OpKind::Sub => a.zip_map(b, |x, y| x - y),
                _ => a.zip_map(b, |x, y| x * y),
            })
        }
        OpKind::MulChannel => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, c, h, w) = require4(op, a)?;
            if b.shape() != [n, 1, h, w] {
                return Err(mismatch(op, a, b));
            }
            let hw = h * w;
            let mut out = a.clone();
            let bd = b.data();
            for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
                let gate = &bd[(i / c) * hw..(i / c + 1) * hw];
                for (o, &g) in chunk.iter_mut().zip(gate) {
                    *o *= g;
                }
            }
            Ok(out)
        }
        OpKind::ScaleBy => {
            let (a, s) = (inputs[0], inputs[1]);
            let s = s.item().ok_or_else(|| mismatch(op, a, s))?;
            Ok(a.map(|x| x * s))
        }
        &OpKind::Scale(k) => Ok(inputs[0].map(|x| x * k)),
        &OpKind::Shift(k) => Ok(inputs[0].map(|x| x + k)),
        OpKind::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = match (a.shape(), b.shape()) {
                (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
                _ => return Err(mismatch(op, a, b)),
            };
            let mut out = Tensor::zeros(&[m, n]);
            gemm(false, false, m, n, k, a.data(), b.data(), T::zero(), out.data_mut());
            Ok(out)
        }
        OpKind::Conv2d => conv2d_forward(op, inputs[0], inputs[1], inputs[2]),
        OpKind::Sigmoid => Ok(inputs[0].map(sigmoid)),
        OpKind::Tanh => Ok(inputs[0].map(|x| x.tanh())),
        OpKind::Relu => Ok(inputs[0].map(|x| x.max(T::zero()))),
        OpKind::Exp => Ok(inputs[0].map(|x| x.exp())),
        OpKind::Log => Ok(inputs[0].map(|x| x.ln())),
        &OpKind::Clamp(lo, hi) => Ok(inputs[0].map(|x| x.max(lo).min(hi))),
        OpKind::Sum => Ok(Tensor::scalar(inputs[0].sum())),
        OpKind::Mean => {
            let a = inputs[0];
            if a.numel() == 0 {
                return Err(invalid(op, a, "mean of empty tensor"));
            }
            Ok(Tensor::scalar(a.sum() / T::from_usize(a.numel()).unwrap()))
        }
        &OpKind::MaxPool(s) | &OpKind::AvgPool(s) => {
            let a = inputs[0];
            let (n, c, h, w) = require4(op, a)?;
            if s == 0 || h % s != 0 || w % s != 0 {
                return Err(invalid(op, a, format!("spatial dims not divisible by pool size {s}")));
            }
            let (ho, wo) = (h / s, w / s);
            let is_max = matches!(op, OpKind::MaxPool(_));
            let norm = T::from_usize(s * s).unwrap();
            let ad = a.data();
            let mut out = Tensor::zeros(&[n, c, ho, wo]);
            for (plane, o) in out.data_mut().chunks_mut(ho * wo).enumerate() {
                let src = &ad[plane * h * w..(plane + 1) * h * w];
                for y in 0..ho {
                    for x in 0..wo {
                        let mut acc = if is_max { T::neg_infinity() } else { T::zero() };
                        for dy in 0..s {
                            for dx in 0..s {
                                let v = src[(y * s + dy) * w + x * s + dx];
                                if is_max {
                                    if v > acc {
                                        acc = v;
                                    }
                                } else {
                                    acc += v;
                                }
                            }
                        }
                        o[y * wo + x] = if is_max { acc } else { acc / norm };
                    }
                }
            }
            Ok(out)
        }
        &OpKind::Upsample(f) => {
            let a = inputs[0];
            let (n, c, h, w) = require4(op, a)?;
            if f == 0 {
                return Err(invalid(op, a, "upsample factor must be positive"));
            }
            let (ho, wo) = (h * f, w * f);
            let ad = a.data();
            let mut out = Tensor::zeros(&[n, c, ho, wo]);
            for (plane, o) in out.data_mut().chunks_mut(ho * wo).enumerate() {
                let src = &ad[plane * h * w..(plane + 1) * h * w];
                for y in 0..ho {
                    for x in 0..wo {
                        o[y * wo + x] = src[(y / f) * w + x / f];
                    }
                }
            }
            Ok(out)
        }
        OpKind::ConcatChannels => {
            let (n, _, h, w) = require4(op, inputs[0])?;
            let mut total_c = 0;
            for t in inputs {
                let (tn, tc, th, tw) = require4(op, t)?;
                if (tn, th, tw) != (n, h, w) {
                    return Err(mismatch(op, inputs[0], t));
                }
                total_c += tc;
            }
            let hw = h * w;
            let mut data = Vec::with_capacity(n * total_c * hw);
            for b in 0..n {
                for t in inputs {
                    let tc = t.shape()[1];
                    data.extend_from_slice(&t.data()[b * tc * hw..(b + 1) * tc * hw]);
                }
            }
            Tensor::new(vec![n, total_c, h, w], data)
        }
        &OpKind::SliceChannels { start, len } => {
            let a = inputs[0];
            let (n, c, h, w) = require4(op, a)?;
            if len == 0 || start + len > c {
                return Err(invalid(op, a, format!("channel slice {start}..{} out of range", start + len)));
            }
            let hw = h * w;
            let mut data = Vec::with_capacity(n * len * hw);
            for b in 0..n {
                data.extend_from_slice(&a.data()[(b * c + start) * hw..(b * c + start + len) * hw]);
            }
            Tensor::new(vec![n, len, h, w], data)
        }
    }
}

/// Target number of patch columns per GEMM, small enough that one block of
/// patches stays in cache.
const COL_BLOCK: usize = 1024;

/// A run of patch columns: samples `b0..b1`, image rows `y0..y1`. Either a
/// single sample or whole images.
#[derive(Clone, Copy)]
struct ColBlock {
    b0: usize,
    b1: usize,
    y0: usize,
    y1: usize,
}

impl ColBlock {
    fn cols(&self, w: usize) -> usize {
        (self.b1 - self.b0) * (self.y1 - self.y0) * w
    }

    /// Offset of row `y` of sample `b` within the block's columns.
    fn offset(&self, b: usize, y: usize, w: usize) -> usize {
        ((b - self.b0) * (self.y1 - self.y0) + (y - self.y0)) * w
    }
}

fn col_blocks(n: usize, h: usize, w: usize) -> Vec<ColBlock> {
    let rows = (COL_BLOCK / w).max(1);
    if rows >= h {
        let per = (COL_BLOCK / (h * w)).max(1);
        (0..n).step_by(per).map(|b0| ColBlock { b0, b1: (b0 + per).min(n), y0: 0, y1: h }).collect()
    } else {
        (0..n)
            .flat_map(|b| (0..h).step_by(rows).map(move |y0| ColBlock { b0: b, b1: b + 1, y0, y1: (y0 + rows).min(h) }))
            .collect()
    }
}

/// Columns of `block` for a `[n, c, h, w]` input, as a `[c·k·k, cols]`
/// matrix of zero-padded patches written into `cols`.
fn im2col_block<T: Scalar>(xd: &[T], (c, h, w): (usize, usize, usize), k: usize, block: ColBlock, cols: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    let ncols = block.cols(w);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                for b in block.b0..block.b1 {
                    let src = &xd[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                    for y in block.y0..block.y1 {
                        let dst = &mut dst_row[block.offset(b, y, w)..][..w];
                        let sy = y as isize + ky as isize - pad as isize;
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            dst.fill(T::zero());
                            continue;
                        }
                        let line = &src[sy as usize * w..(sy as usize + 1) * w];
                        dst[..x_lo].fill(T::zero());
                        dst[x_hi..].fill(T::zero());
                        dst[x_lo..x_hi].copy_from_slice(&line[x_lo + kx - pad..x_hi + kx - pad]);
                    }
                }
            }
        }
    }
}

/// Scatter-adds a block column matrix back onto an input-shaped gradient.
fn col2im_block<T: Scalar>(cols: &[T], (c, h, w): (usize, usize, usize), k: usize, block: ColBlock, od: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    let ncols = block.cols(w);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for b in block.b0..block.b1 {
                    let dst = &mut od[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                    for y in block.y0..block.y1 {
                        let sy = y as isize + ky as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &src_row[block.offset(b, y, w) + x_lo..][..x_hi - x_lo];
                        let line = &mut dst[sy as usize * w + x_lo + kx - pad..][..x_hi - x_lo];
                        for (d, &s) in line.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Copies each channel's rows of `block` from a `[n, c, h, w]` tensor into
/// the block's `[c, cols]` matrix.
fn gather_block<T: Scalar>(tensor: &[T], matrix: &mut [T], (c, h, w): (usize, usize, usize), block: ColBlock) {
    let ncols = block.cols(w);
    let run = (block.y1 - block.y0) * w;
    for ch in 0..c {
        for b in block.b0..block.b1 {
            let src = &tensor[(b * c + ch) * h * w + block.y0 * w..][..run];
            matrix[ch * ncols + block.offset(b, block.y0, w)..][..run].copy_from_slice(src);
        }
    }
}

/// Inverse of [`gather_block`].
fn scatter_block<T: Scalar>(matrix: &[T], tensor: &mut [T], (c, h, w): (usize, usize, usize), block: ColBlock) {
    let ncols = block.cols(w);
    let run = (block.y1 - block.y0) * w;
    for ch in 0..c {
        for b in block.b0..block.b1 {
            let src = &matrix[ch * ncols + block.offset(b, block.y0, w)..][..run];
            tensor[(b * c + ch) * h * w + block.y0 * w..][..run].copy_from_slice(src);
        }
    }
}

fn conv_dims<T: Scalar>(
    op: &OpKind<T>,
    x: &Tensor<T>,
    wt: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize, usize), AutodiffError> {
    let (n, cin, h, w) = require4(op, x)?;
    let (cout, wcin, kh, kw) = wt.dims4().ok_or_else(|| invalid(op, wt, "kernel must be [cout, cin, k, k]"))?;
    if wcin != cin {
        return Err(mismatch(op, x, wt));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(invalid(op, wt, "kernel must be square with odd size"));
    }
    if bias.shape() != [cout] {
        return Err(mismatch(op, wt, bias));
    }
    Ok((n, cin, h, w, cout, kh))
}

fn conv2d_forward<T: Scalar>(
    op: &OpKind<T>,
    x: &Tensor<T>,
    wt: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, AutodiffError> {
    let (n, cin, h, w, cout, k) = conv_dims(op, x, wt, bias)?;
    let ckk = cin * k * k;
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    let blocks = col_blocks(n, h, w);
    let max_cols = blocks.iter().map(|b| b.cols(w)).max().unwrap_or(0);
    let mut cols = vec![T::zero(); ckk * max_cols];
    let mut mat = vec![T::zero(); cout * max_cols];
    for block in blocks {
        let nc = block.cols(w);
        im2col_block(x.data(), (cin, h, w), k, block, &mut cols);
        let mat = &mut mat[..cout * nc];
        gemm(false, false, cout, nc, ckk, wt.data(), &cols[..ckk * nc], T::zero(), mat);
        for (row, &bv) in mat.chunks_mut(nc).zip(bias.data()) {
            row.iter_mut().for_each(|v| *v += bv);
        }
        scatter_block(mat, out.data_mut(), (cout, h, w), block);
    }
    Ok(out)
}

/// Gradients of `op` with respect to each input. Entries for inputs whose
/// `needs` flag is false may be `None`.
pub(crate) fn vjp<T: Scalar>(
    op: &OpKind<T>,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    grad: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match op {
        OpKind::Leaf | OpKind::Constant => Vec::new(),
        OpKind::Add => vec![Some(grad.clone()), Some(grad.clone())],
        OpKind::Sub => vec![Some(grad.clone()), want(1).then(|| grad.map(|g| -g))],
        OpKind::Mul => vec![
            want(0).then(|| grad.zip_map(inputs[1], |g, b| g * b)),
            want(1).then(|| grad.zip_map(inputs[0], |g, a| g * a)),
        ],
        OpKind::MulChannel => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, c, h, w) = a.dims4().unwrap();
            let hw = h * w;
            let da = want(0).then(|| {
                let mut da = grad.clone();
                for (i, chunk) in da.data_mut().chunks_mut(hw).enumerate() {
                    let gate = &b.data()[(i / c) * hw..(i / c + 1) * hw];
                    for (d, &g) in chunk.iter_mut().zip(gate) {
                        *d *= g;
                    }
                }
                da
            });
            let db = want(1).then(|| {
                let mut db = Tensor::zeros(&[n, 1, h, w]);
                let dd = db.data_mut();
                for (i, (gc, ac)) in grad.data().chunks(hw).zip(a.data().chunks(hw)).enumerate() {
                    let dst = &mut dd[(i / c) * hw..(i / c + 1) * hw];
                    for ((d, &g), &av) in dst.iter_mut().zip(gc).zip(ac) {
                        *d += g * av;
                    }
                }
                db
            });
            vec![da, db]
        }
        OpKind::ScaleBy => {
            let (a, s) = (inputs[0], inputs[1]);
            let sv = s.item().unwrap();
            let da = want(0).then(|| grad.map(|g| g * sv));
            let ds = want(1).then(|| {
                let total: T = grad.data().iter().zip(a.data()).map(|(&g, &x)| g * x).sum();
                Tensor::full(s.shape(), total)
            });
            vec![da, ds]
        }
        &OpKind::Scale(k) => vec![Some(grad.map(|g| g * k))],
        OpKind::Shift(_) => vec![Some(grad.clone())],
        OpKind::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let da = want(0).then(|| {
                let mut da = Tensor::zeros(&[m, k]);
                gemm(false, true, m, k, n, grad.data(), b.data(), T::zero(), da.data_mut());
                da
            });
            let db = want(1).then(|| {
                let mut db = Tensor::zeros(&[k, n]);
                gemm(true, false, k, n, m, a.data(), grad.data(), T::zero(), db.data_mut());
                db
            });
            vec![da, db]
        }
        OpKind::Conv2d => conv2d_vjp(inputs[0], inputs[1], grad, needs),
        OpKind::Sigmoid => vec![Some(grad.zip_map(output, |g, y| g * y * (T::one() - y)))],
        OpKind::Tanh => vec![Some(grad.zip_map(output, |g, y| g * (T::one() - y * y)))],
        OpKind::Relu => vec![Some(grad.zip_map(inputs[0], |g, x| if x > T::zero() { g } else { T::zero() }))],
        OpKind::Exp => vec![Some(grad.zip_map(output, |g, y| g * y))],
        OpKind::Log => vec![Some(grad.zip_map(inputs[0], |g, x| g / x))],
        &OpKind::Clamp(lo, hi) => {
            vec![Some(grad.zip_map(inputs[0], |g, x| if x > lo && x < hi { g } else { T::zero() }))]
        }
        OpKind::Sum => {
            let g = grad.item().unwrap();
            vec![Some(Tensor::full(inputs[0].shape(), g))]
        }
        OpKind::Mean => {
            let a = inputs[0];
            let g = grad.item().unwrap() / T::from_usize(a.numel()).unwrap();
            vec![Some(Tensor::full(a.shape(), g))]
        }
        &OpKind::MaxPool(s) | &OpKind::AvgPool(s) => {
            let a = inputs[0];
            let (n, c, h, w) = a.dims4().unwrap();
            let (ho, wo) = (h / s, w / s);
            let is_max = matches!(op, OpKind::MaxPool(_));
            let norm = T::from_usize(s * s).unwrap();
            let mut da = Tensor::zeros(&[n, c, h, w]);
            let (ad, gd) = (a.data(), grad.data());
            for (plane, dst) in da.data_mut().chunks_mut(h * w).enumerate() {
                let src = &ad[plane * h * w..(plane + 1) * h * w];
                let g = &gd[plane * ho * wo..(plane + 1) * ho * wo];
                for y in 0..ho {
                    for x in 0..wo {
                        let gv = g[y * wo + x];
                        if is_max {
                            // First maximal element takes the gradient, matching forward.
                            let mut best = (0, T::neg_infinity());
                            for dy in 0..s {
                                for dx in 0..s {
                                    let idx = (y * s + dy) * w + x * s + dx;
                                    if src[idx] > best.1 {
                                        best = (idx, src[idx]);
                                    }
                                }
                            }
                            dst[best.0] += gv;
                        } else {
                            for dy in 0..s {
                                for dx in 0..s {
                                    dst[(y * s + dy) * w + x * s + dx] += gv / norm;
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(da)]
        }
        &OpKind::Upsample(f) => {
            let a = inputs[0];
            let (n, c, h, w) = a.dims4().unwrap();
            let wo = w * f;
            let mut da = Tensor::zeros(&[n, c, h, w]);
            let gd = grad.data();
            for (plane, dst) in da.data_mut().chunks_mut(h * w).enumerate() {
                let g = &gd[plane * h * w * f * f..(plane + 1) * h * w * f * f];
                for y in 0..h * f {
                    for x in 0..wo {
                        dst[(y / f) * w + x / f] += g[y * wo + x];
                    }
                }
            }
            vec![Some(da)]
        }
        OpKind::ConcatChannels => {
            let (n, total_c, h, w) = output.dims4().unwrap();
            let hw = h * w;
            let mut offset = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for (i, t) in inputs.iter().enumerate() {
                let tc = t.shape()[1];
                if want(i) {
                    let mut data = Vec::with_capacity(n * tc * hw);
                    for b in 0..n {
                        let base = (b * total_c + offset) * hw;
                        data.extend_from_slice(&grad.data()[base..base + tc * hw]);
                    }
                    out.push(Some(Tensor::new(t.shape().to_vec(), data).unwrap()));
                } else {
                    out.push(None);
                }
                offset += tc;
            }
            out
        }
        &OpKind::SliceChannels { start, len } => {
            let a = inputs[0];
            let (n, c, h, w) = a.dims4().unwrap();
            let hw = h * w;
            let mut da = Tensor::zeros(a.shape());
            for b in 0..n {
                da.data_mut()[(b * c + start) * hw..(b * c + start + len) * hw]
                    .copy_from_slice(&grad.data()[b * len * hw..(b + 1) * len * hw]);
            }
            vec![Some(da)]
        }
    }
}

fn conv2d_vjp<T: Scalar>(x: &Tensor<T>, wt: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
    let (n, cin, h, w) = x.dims4().unwrap();
    let (cout, _, k, _) = wt.dims4().unwrap();
    let ckk = cin * k * k;
    let blocks = col_blocks(n, h, w);
    let max_cols = blocks.iter().map(|b| b.cols(w)).max().unwrap_or(0);
    let mut gmat = vec![T::zero(); cout * max_cols];
    let mut cols = vec![T::zero(); ckk * max_cols];
    let mut dx = needs[0].then(|| Tensor::zeros(&[n, cin, h, w]));
    let mut dw = needs[1].then(|| Tensor::zeros(wt.shape()));
    let mut db = needs[2].then(|| Tensor::zeros(&[cout]));
    for block in blocks {
        let nc = block.cols(w);
        let gm = &mut gmat[..cout * nc];
        gather_block(grad.data(), gm, (cout, h, w), block);
        if let Some(dx) = dx.as_mut() {
            gemm(true, false, ckk, nc, cout, wt.data(), gm, T::zero(), &mut cols[..ckk * nc]);
            col2im_block(&cols[..ckk * nc], (cin, h, w), k, block, dx.data_mut());
        }
        if let Some(dw) = dw.as_mut() {
            im2col_block(x.data(), (cin, h, w), k, block, &mut cols);
            gemm(false, true, cout, ckk, nc, gm, &cols[..ckk * nc], T::one(), dw.data_mut());
        }
        if let Some(db) = db.as_mut() {
            for (d, row) in db.data_mut().iter_mut().zip(gm.chunks(nc)) {
                *d += row.iter().copied().sum();
            }
        }
    }
    vec![dx, dw, db]
}
