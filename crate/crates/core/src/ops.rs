//! Forward and backward kernels for the tensor primitives.
//!
//! These are plain functions over [`Tensor`]; the tape records which kernel
//! produced which value and replays the matching backward kernel.

use crate::error::{CtxError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ---- conv2d ----

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (cin, h, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wcin != cin {
        return Err(CtxError::ShapeMismatch(format!(
            "conv2d: input has {cin} channels (shape {:?}) but weight expects {wcin} (shape {:?})",
            x.shape(),
            w.shape()
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(CtxError::InvalidArgument(format!(
            "conv2d: kernel dims must be odd, got {kh}x{kw}"
        )));
    }
    if stride < 1 {
        return Err(CtxError::InvalidArgument("conv2d: stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || iw + 2 * pad < kw {
        return Err(CtxError::ShapeMismatch(format!(
            "conv2d: padded input {}x{} smaller than kernel {kh}x{kw}",
            h + 2 * pad,
            iw + 2 * pad
        )));
    }
    if b.shape() != [cout] {
        return Err(CtxError::ShapeMismatch(format!(
            "conv2d: bias shape {:?} != [{cout}]",
            b.shape()
        )));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (iw + 2 * pad - kw) / stride + 1;
    let mut y = Tensor::zeros(vec![cout, ho, wo]);
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    for co in 0..cout {
        let bias = b.data()[co];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (ci * h + iy as usize) * iw;
                        let wrow = ((co * cin + ci) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            acc += xd[xrow + ix as usize] * wd[wrow + kx];
                        }
                    }
                }
                yd[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Ok(y)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (cin, h, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (gy.shape()[1], gy.shape()[2]);
    let mut gx = Tensor::zeros(vec![cin, h, iw]);
    let mut gw = Tensor::zeros(vec![cout, cin, kh, kw]);
    let mut gb = Tensor::zeros(vec![cout]);
    let xd = x.data();
    let wd = w.data();
    let gyd = gy.data();
    for co in 0..cout {
        let mut bsum = T::zero();
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gyd[(co * ho + oy) * wo + ox];
                bsum += g;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (ci * h + iy as usize) * iw;
                        let wrow = ((co * cin + ci) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            gx.data_mut()[xrow + ix as usize] += wd[wrow + kx] * g;
                            gw.data_mut()[wrow + kx] += xd[xrow + ix as usize] * g;
                        }
                    }
                }
            }
        }
        gb.data_mut()[co] = bsum;
    }
    (gx, gw, gb)
}

// ---- max_pool2d ----

/// Returns the pooled map and, per output cell, the flat source index of the
/// winning input (first maximum in row-major window scan). Padding is -inf,
/// so padded cells never win.
pub fn max_pool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if k < 1 || stride < 1 {
        return Err(CtxError::InvalidArgument("max_pool2d: k and stride must be >= 1".into()));
    }
    if k > h + 2 * pad || k > w + 2 * pad {
        return Err(CtxError::ShapeMismatch(format!(
            "max_pool2d: window {k} exceeds padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut y = Tensor::zeros(vec![c, ho, wo]);
    let mut arg = vec![0usize; c * ho * wo];
    let xd = x.data();
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = (ci * h + iy as usize) * w + ix as usize;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ci * ho + oy) * wo + ox;
                y.data_mut()[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool2d_backward<T: Scalar>(
    x_shape: &[usize],
    arg: &[usize],
    gy: &Tensor<T>,
) -> Tensor<T> {
    let mut gx = Tensor::zeros(x_shape.to_vec());
    for (o, &src) in arg.iter().enumerate() {
        if src != usize::MAX {
            gx.data_mut()[src] += gy.data()[o];
        }
    }
    gx
}

// ---- bilinear resize (align-corners) ----

#[inline]
fn bilinear_axis(dst: usize, src: usize, i: usize) -> (usize, usize, f64) {
    // Returns (lo, hi, frac): source indices and interpolation fraction.
    if dst == 1 || src == 1 {
        // Single sample maps to the center (only index 0 exists when src == 1;
        // when dst == 1 align-corners degenerates to the first sample).
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

pub fn bilinear_forward<T: Scalar>(x: &Tensor<T>, h2: usize, w2: usize) -> Result<Tensor<T>> {
    if h2 < 1 || w2 < 1 {
        return Err(CtxError::InvalidArgument("bilinear_resize: target dims must be >= 1".into()));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut y = Tensor::zeros(vec![c, h2, w2]);
    for oy in 0..h2 {
        let (y0, y1, fy) = bilinear_axis(h2, h, oy);
        let fy = T::from_f64(fy);
        for ox in 0..w2 {
            let (x0, x1, fx) = bilinear_axis(w2, w, ox);
            let fx = T::from_f64(fx);
            for ci in 0..c {
                let v00 = x.at3(ci, y0, x0);
                let v01 = x.at3(ci, y0, x1);
                let v10 = x.at3(ci, y1, x0);
                let v11 = x.at3(ci, y1, x1);
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                let o = (ci * h2 + oy) * w2 + ox;
                y.data_mut()[o] = top + (bot - top) * fy;
            }
        }
    }
    Ok(y)
}

pub fn bilinear_backward<T: Scalar>(x_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (h2, w2) = (gy.shape()[1], gy.shape()[2]);
    let mut gx = Tensor::zeros(vec![c, h, w]);
    let one = T::one();
    for oy in 0..h2 {
        let (y0, y1, fy) = bilinear_axis(h2, h, oy);
        let fy = T::from_f64(fy);
        for ox in 0..w2 {
            let (x0, x1, fx) = bilinear_axis(w2, w, ox);
            let fx = T::from_f64(fx);
            for ci in 0..c {
                let g = gy.at3(ci, oy, ox);
                let gxd = gx.data_mut();
                gxd[(ci * h + y0) * w + x0] += g * (one - fy) * (one - fx);
                gxd[(ci * h + y0) * w + x1] += g * (one - fy) * fx;
                gxd[(ci * h + y1) * w + x0] += g * fy * (one - fx);
                gxd[(ci * h + y1) * w + x1] += g * fy * fx;
            }
        }
    }
    gx
}

// ---- linear ----

pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let (dout, wdin) = (w.shape()[0], w.shape()[1]);
    if din != wdin {
        return Err(CtxError::ShapeMismatch(format!(
            "linear: input width {din} != weight width {wdin}"
        )));
    }
    if b.shape() != [dout] {
        return Err(CtxError::ShapeMismatch(format!(
            "linear: bias shape {:?} != [{dout}]",
            b.shape()
        )));
    }
    let mut y = Tensor::zeros(vec![n, dout]);
    for r in 0..n {
        let xrow = &x.data()[r * din..(r + 1) * din];
        for o in 0..dout {
            let wrow = &w.data()[o * din..(o + 1) * din];
            let mut acc = b.data()[o];
            for i in 0..din {
                acc += xrow[i] * wrow[i];
            }
            y.data_mut()[r * dout + o] = acc;
        }
    }
    Ok(y)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let mut gx = Tensor::zeros(vec![n, din]);
    let mut gw = Tensor::zeros(vec![dout, din]);
    let mut gb = Tensor::zeros(vec![dout]);
    for r in 0..n {
        let xrow = &x.data()[r * din..(r + 1) * din];
        for o in 0..dout {
            let g = gy.data()[r * dout + o];
            gb.data_mut()[o] += g;
            let wrow = &w.data()[o * din..(o + 1) * din];
            let gxrow = &mut gx.data_mut()[r * din..(r + 1) * din];
            for i in 0..din {
                gxrow[i] += wrow[i] * g;
            }
            let gwrow = &mut gw.data_mut()[o * din..(o + 1) * din];
            for i in 0..din {
                gwrow[i] += xrow[i] * g;
            }
        }
    }
    (gx, gw, gb)
}

// ---- relu ----

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes iff input > 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        if x.data()[i] > T::zero() {
            gx.data_mut()[i] = gy.data()[i];
        }
    }
    gx
}

// ---- softmax cross-entropy ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Returns (loss, softmax probabilities). `targets[r]` is the class of row r.
pub fn softmax_xent_forward<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    reduction: Reduction,
) -> Result<(T, Tensor<T>)> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != n {
        return Err(CtxError::ShapeMismatch(format!(
            "softmax_xent: {n} rows but {} targets",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return Err(CtxError::InvalidArgument(format!(
            "softmax_xent: target {t} out of range [0,{k})"
        )));
    }
    let mut probs = Tensor::zeros(vec![n, k]);
    let mut loss = T::zero();
    for r in 0..n {
        let row = &logits.data()[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for i in 0..k {
            z += (row[i] - m).exp();
        }
        let logz = m + z.ln();
        for i in 0..k {
            probs.data_mut()[r * k + i] = (row[i] - logz).exp();
        }
        loss += logz - row[targets[r]];
    }
    if reduction == Reduction::Mean && n > 0 {
        loss /= T::from_f64(n as f64);
    }
    Ok((loss, probs))
}

/// Row gradient is (softmax - onehot), scaled by 1/n for mean reduction.
pub fn softmax_xent_backward<T: Scalar>(
    probs: &Tensor<T>,
    targets: &[usize],
    reduction: Reduction,
    seed: T,
) -> Tensor<T> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = match reduction {
        Reduction::Mean => seed / T::from_f64(n.max(1) as f64),
        Reduction::Sum => seed,
    };
    let mut g = Tensor::zeros(vec![n, k]);
    for r in 0..n {
        for i in 0..k {
            let p = probs.data()[r * k + i];
            let y = if targets[r] == i { T::one() } else { T::zero() };
            g.data_mut()[r * k + i] = (p - y) * scale;
        }
    }
    g
}

// ---- layout ops ----

/// [C,H,W] -> [H*W, C] with node p = row-major spatial index.
pub fn chw_to_rows_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut y = Tensor::zeros(vec![h * w, c]);
    for ci in 0..c {
        for s in 0..h * w {
            y.data_mut()[s * c + ci] = x.data()[ci * h * w + s];
        }
    }
    y
}

pub fn chw_to_rows_backward<T: Scalar>(x_shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let mut gx = Tensor::zeros(vec![c, h, w]);
    for ci in 0..c {
        for s in 0..h * w {
            gx.data_mut()[ci * h * w + s] = gy.data()[s * c + ci];
        }
    }
    gx
}

/// Select rows of an [N,d] matrix.
pub fn gather_rows_forward<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if let Some(&i) = idx.iter().find(|&&i| i >= n) {
        return Err(CtxError::InvalidArgument(format!(
            "gather_rows: index {i} out of range [0,{n})"
        )));
    }
    if idx.is_empty() {
        return Err(CtxError::InvalidArgument("gather_rows: empty index list".into()));
    }
    let mut y = Tensor::zeros(vec![idx.len(), d]);
    for (r, &i) in idx.iter().enumerate() {
        y.data_mut()[r * d..(r + 1) * d].copy_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    Ok(y)
}

pub fn gather_rows_backward<T: Scalar>(x_shape: &[usize], idx: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let d = x_shape[1];
    let mut gx = Tensor::zeros(x_shape.to_vec());
    for (r, &i) in idx.iter().enumerate() {
        let row = &gy.data()[r * d..(r + 1) * d];
        let dst = &mut gx.data_mut()[i * d..(i + 1) * d];
        for j in 0..d {
            dst[j] += row[j];
        }
    }
    gx
}

/// [E,a] ++ [E,b] -> [E,a+b] columnwise.
pub fn concat_cols_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, da) = (a.shape()[0], a.shape()[1]);
    let (nb, db) = (b.shape()[0], b.shape()[1]);
    if n != nb {
        return Err(CtxError::ShapeMismatch(format!(
            "concat_cols: row counts {n} != {nb}"
        )));
    }
    let mut y = Tensor::zeros(vec![n, da + db]);
    for r in 0..n {
        y.data_mut()[r * (da + db)..r * (da + db) + da]
            .copy_from_slice(&a.data()[r * da..(r + 1) * da]);
        y.data_mut()[r * (da + db) + da..(r + 1) * (da + db)]
            .copy_from_slice(&b.data()[r * db..(r + 1) * db]);
    }
    Ok(y)
}

pub fn concat_cols_backward<T: Scalar>(da: usize, db: usize, gy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let n = gy.shape()[0];
    let mut ga = Tensor::zeros(vec![n, da]);
    let mut gb = Tensor::zeros(vec![n, db]);
    for r in 0..n {
        ga.data_mut()[r * da..(r + 1) * da]
            .copy_from_slice(&gy.data()[r * (da + db)..r * (da + db) + da]);
        gb.data_mut()[r * db..(r + 1) * db]
            .copy_from_slice(&gy.data()[r * (da + db) + da..(r + 1) * (da + db)]);
    }
    (ga, gb)
}

/// Channel concatenation of [Ci,H,W] maps with equal spatial dims.
pub fn concat_channels_forward<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (h, w) = (xs[0].shape()[1], xs[0].shape()[2]);
    for x in xs {
        if x.shape()[1] != h || x.shape()[2] != w {
            return Err(CtxError::ShapeMismatch(format!(
                "concat_channels: spatial dims {:?} != [{h},{w}]",
                &x.shape()[1..]
            )));
        }
    }
    let ctot: usize = xs.iter().map(|x| x.shape()[0]).sum();
    let mut data = Vec::with_capacity(ctot * h * w);
    for x in xs {
        data.extend_from_slice(x.data());
    }
    Tensor::new(vec![ctot, h, w], data)
}

pub fn concat_channels_backward<T: Scalar>(shapes: &[Vec<usize>], gy: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        out.push(Tensor::new(s.clone(), gy.data()[off..off + n].to_vec()).unwrap());
        off += n;
    }
    out
}

/// Pad a [C,H,W] map on each side with a constant value.
pub fn pad2d_forward<T: Scalar>(
    x: &Tensor<T>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
    value: T,
) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (h2, w2) = (h + top + bottom, w + left + right);
    let mut y = Tensor::full(vec![c, h2, w2], value);
    for ci in 0..c {
        for r in 0..h {
            let src = &x.data()[(ci * h + r) * w..(ci * h + r + 1) * w];
            let dst_off = (ci * h2 + r + top) * w2 + left;
            y.data_mut()[dst_off..dst_off + w].copy_from_slice(src);
        }
    }
    y
}

pub fn pad2d_backward<T: Scalar>(
    x_shape: &[usize],
    top: usize,
    left: usize,
    gy: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (h2, w2) = (gy.shape()[1], gy.shape()[2]);
    let mut gx = Tensor::zeros(x_shape.to_vec());
    for ci in 0..c {
        for r in 0..h {
            let src_off = (ci * h2 + r + top) * w2 + left;
            let dst = &mut gx.data_mut()[(ci * h + r) * w..(ci * h + r + 1) * w];
            dst.copy_from_slice(&gy.data()[src_off..src_off + w]);
        }
    }
    gx
}
