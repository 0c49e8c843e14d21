//! Numeric kernels shared by the autodiff graph and no-grad inference.
//!
//! Every kernel is a pure function of its inputs. Convolution goes through
//! im2col + matmul; the rest are direct loops. All math is f64.

use crate::nn::tensor::Tensor;

/// Geometry of a 2-d convolution. Kernels, strides and padding are square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn unit(kernel: usize) -> Self {
        ConvSpec {
            kernel,
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }

    /// Output extent along one axis, or None if the input is too small.
    pub fn out_extent(&self, input: usize) -> Option<usize> {
        let eff = self.dilation * (self.kernel - 1) + 1;
        let padded = input + 2 * self.pad;
        if padded < eff {
            return None;
        }
        Some((padded - eff) / self.stride + 1)
    }
}

/// `c[m, n] += a[m, k] * b[k, n]`, plain ikj loop.
pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m, n] += a[k, m]^T * b[k, n]`.
fn matmul_t_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a_row[i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// Unfold `x [Ci, H, W]` into columns `[Ci*K*K, Oh*Ow]`. Out-of-bounds taps
/// (padding) contribute zeros.
fn im2col(x: &Tensor, spec: ConvSpec, oh: usize, ow: usize) -> Vec<f64> {
    let (ci, h, w) = x.chw();
    let k = spec.kernel;
    let mut col = vec![0.0; ci * k * k * oh * ow];
    let xd = x.data();
    let on = oh * ow;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * on;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (c * h + iy as usize) * w;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix =
                            (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[dst + ox] = xd[src + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add columns back to input layout; adjoint of [`im2col`].
fn col2im(col: &[f64], spec: ConvSpec, ci: usize, h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
    let k = spec.kernel;
    let mut x = Tensor::zeros(&[ci, h, w]);
    let xd = x.data_mut();
    let on = oh * ow;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * on;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (c * h + iy as usize) * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix =
                            (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        xd[dst + ix as usize] += col[src + ox];
                    }
                }
            }
        }
    }
    x
}

/// 2-d convolution (cross-correlation, the deep-learning convention).
/// `x [Ci, H, W]`, `w [Co, Ci, K, K]`, optional bias `[Co]`.
pub fn conv2d_fwd(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: ConvSpec) -> Tensor {
    let (ci, h, win) = x.chw();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be 4-d");
    assert_eq!(ws[1], ci, "conv in-channel mismatch");
    assert_eq!(ws[2], spec.kernel);
    assert_eq!(ws[3], spec.kernel);
    let co = ws[0];
    let oh = spec.out_extent(h).expect("conv input too small");
    let ow = spec.out_extent(win).expect("conv input too small");

    let col = im2col(x, spec, oh, ow);
    let kk = ci * spec.kernel * spec.kernel;
    let mut y = Tensor::zeros(&[co, oh, ow]);
    matmul_acc(y.data_mut(), w.data(), &col, co, kk, oh * ow);
    if let Some(bias) = b {
        assert_eq!(bias.len(), co, "conv bias length mismatch");
        let yd = y.data_mut();
        for c in 0..co {
            let bv = bias.data()[c];
            for v in &mut yd[c * oh * ow..(c + 1) * oh * ow] {
                *v += bv;
            }
        }
    }
    y
}

/// Gradients of [`conv2d_fwd`] w.r.t. input, weight and bias.
pub fn conv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    spec: ConvSpec,
    gy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (ci, h, win) = x.chw();
    let (co, oh, ow) = gy.chw();
    let kk = ci * spec.kernel * spec.kernel;
    let on = oh * ow;

    // dW = gy [Co, On] * col^T [On, kk]
    let col = im2col(x, spec, oh, ow);
    let mut gw = Tensor::zeros(&[co, w.shape()[1], spec.kernel, spec.kernel]);
    {
        // gw[co, kk] += sum_on gy[co, on] * col[kk, on]
        let gwd = gw.data_mut();
        let gyd = gy.data();
        for o in 0..co {
            let gy_row = &gyd[o * on..(o + 1) * on];
            let gw_row = &mut gwd[o * kk..(o + 1) * kk];
            for p in 0..kk {
                let col_row = &col[p * on..(p + 1) * on];
                let mut acc = 0.0;
                for (g, c) in gy_row.iter().zip(col_row.iter()) {
                    acc += g * c;
                }
                gw_row[p] += acc;
            }
        }
    }

    // dcol = W^T [kk, Co] * gy [Co, On], then fold back to input layout.
    let mut gcol = vec![0.0; kk * on];
    matmul_t_acc(&mut gcol, w.data(), gy.data(), kk, co, on);
    let gx = col2im(&gcol, spec, ci, h, win, oh, ow);

    // dB = per-channel sum of gy.
    let mut gb = Tensor::zeros(&[co]);
    {
        let gbd = gb.data_mut();
        let gyd = gy.data();
        for c in 0..co {
            gbd[c] = gyd[c * on..(c + 1) * on].iter().sum();
        }
    }
    (gx, gw, gb)
}

pub fn relu_fwd(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_bwd(x: &Tensor, gy: &Tensor) -> Tensor {
    let mut gx = gy.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(x.data().iter()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}

/// Channel normalization over the spatial extent of one sample, followed by
/// a learned affine map. Statistics are per channel over H*W.
/// Returns `(y, mean, inv_std)`; the stats feed both the backward pass and
/// the running-average buffers.
pub fn norm_train_fwd(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (c, h, w) = x.chw();
    let n = (h * w) as f64;
    let mut y = Tensor::zeros(&[c, h, w]);
    let mut means = vec![0.0; c];
    let mut istds = vec![0.0; c];
    for ch in 0..c {
        let xs = &x.data()[ch * h * w..(ch + 1) * h * w];
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + eps).sqrt();
        let g = gamma.data()[ch];
        let b = beta.data()[ch];
        let ys = &mut y.data_mut()[ch * h * w..(ch + 1) * h * w];
        for (yv, &xv) in ys.iter_mut().zip(xs.iter()) {
            *yv = g * (xv - mean) * istd + b;
        }
        means[ch] = mean;
        istds[ch] = istd;
    }
    (y, means, istds)
}

/// Backward of [`norm_train_fwd`] through the batch statistics.
pub fn norm_train_bwd(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f64],
    istd: &[f64],
    gy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = x.chw();
    let n = (h * w) as f64;
    let mut gx = Tensor::zeros(&[c, h, w]);
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let xs = &x.data()[ch * h * w..(ch + 1) * h * w];
        let gys = &gy.data()[ch * h * w..(ch + 1) * h * w];
        let (m, is) = (mean[ch], istd[ch]);
        let mut sum_g = 0.0;
        let mut sum_gxhat = 0.0;
        for (&g, &xv) in gys.iter().zip(xs.iter()) {
            let xhat = (xv - m) * is;
            sum_g += g;
            sum_gxhat += g * xhat;
        }
        ggamma.data_mut()[ch] = sum_gxhat;
        gbeta.data_mut()[ch] = sum_g;
        let gsc = gamma.data()[ch] * is;
        let gxs = &mut gx.data_mut()[ch * h * w..(ch + 1) * h * w];
        for ((gxv, &g), &xv) in gxs.iter_mut().zip(gys.iter()).zip(xs.iter()) {
            let xhat = (xv - m) * is;
            *gxv = gsc * (g - sum_g / n - xhat * sum_gxhat / n);
        }
    }
    (gx, ggamma, gbeta)
}

/// Normalization with frozen running statistics (inference mode).
pub fn norm_eval_fwd(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Tensor {
    let (c, h, w) = x.chw();
    let mut y = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let m = running_mean.data()[ch];
        let istd = 1.0 / (running_var.data()[ch] + eps).sqrt();
        let g = gamma.data()[ch];
        let b = beta.data()[ch];
        let xs = &x.data()[ch * h * w..(ch + 1) * h * w];
        let ys = &mut y.data_mut()[ch * h * w..(ch + 1) * h * w];
        for (yv, &xv) in ys.iter_mut().zip(xs.iter()) {
            *yv = g * (xv - m) * istd + b;
        }
    }
    y
}

/// Valid depth-wise cross correlation: channel c of the output is the
/// correlation of search channel c with kernel channel c, no padding.
pub fn depthwise_xcorr_fwd(search: &Tensor, kernel: &Tensor) -> Tensor {
    let (c, sh, sw) = search.chw();
    let (ck, kh, kw) = kernel.chw();
    assert_eq!(c, ck, "xcorr channel mismatch");
    assert!(kh <= sh && kw <= sw, "xcorr kernel larger than search");
    let oh = sh - kh + 1;
    let ow = sw - kw + 1;
    let mut y = Tensor::zeros(&[c, oh, ow]);
    for ch in 0..c {
        let s = &search.data()[ch * sh * sw..(ch + 1) * sh * sw];
        let k = &kernel.data()[ch * kh * kw..(ch + 1) * kh * kw];
        let ys = &mut y.data_mut()[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for ky in 0..kh {
                let srow = &s[(oy + ky) * sw..(oy + ky) * sw + sw];
                let krow = &k[ky * kw..(ky + 1) * kw];
                let yrow = &mut ys[oy * ow..(oy + 1) * ow];
                for (kx, &kv) in krow.iter().enumerate() {
                    if kv == 0.0 {
                        continue;
                    }
                    for ox in 0..ow {
                        yrow[ox] += kv * srow[ox + kx];
                    }
                }
            }
        }
    }
    y
}

/// Gradients of [`depthwise_xcorr_fwd`] w.r.t. search and kernel.
pub fn depthwise_xcorr_bwd(search: &Tensor, kernel: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let (c, sh, sw) = search.chw();
    let (_, kh, kw) = kernel.chw();
    let (_, oh, ow) = gy.chw();
    let mut gs = Tensor::zeros(&[c, sh, sw]);
    let mut gk = Tensor::zeros(&[c, kh, kw]);
    for ch in 0..c {
        let s = &search.data()[ch * sh * sw..(ch + 1) * sh * sw];
        let k = &kernel.data()[ch * kh * kw..(ch + 1) * kh * kw];
        let g = &gy.data()[ch * oh * ow..(ch + 1) * oh * ow];
        let gsd = &mut gs.data_mut()[ch * sh * sw..(ch + 1) * sh * sw];
        for oy in 0..oh {
            let grow = &g[oy * ow..(oy + 1) * ow];
            for ky in 0..kh {
                let krow = &k[ky * kw..(ky + 1) * kw];
                let srow_off = (oy + ky) * sw;
                for kx in 0..kw {
                    let kv = krow[kx];
                    let mut acc = 0.0;
                    for ox in 0..ow {
                        let gv = grow[ox];
                        gsd[srow_off + ox + kx] += gv * kv;
                        acc += gv * s[srow_off + ox + kx];
                    }
                    gk.data_mut()[(ch * kh + ky) * kw + kx] += acc;
                }
            }
        }
    }
    (gs, gk)
}

/// Centered square crop of a `[C, S, S]` map down to `[C, out, out]`.
/// Requires `S >= out` and matching parity so the window is exact.
pub fn center_crop_fwd(x: &Tensor, out: usize) -> Tensor {
    let (c, h, w) = x.chw();
    assert!(h >= out && w >= out, "crop larger than input");
    assert_eq!((h - out) % 2, 0, "crop window is not centered");
    assert_eq!((w - out) % 2, 0, "crop window is not centered");
    let oy = (h - out) / 2;
    let ox = (w - out) / 2;
    let mut y = Tensor::zeros(&[c, out, out]);
    for ch in 0..c {
        for r in 0..out {
            let src = (ch * h + oy + r) * w + ox;
            let dst = (ch * out + r) * out;
            y.data_mut()[dst..dst + out].copy_from_slice(&x.data()[src..src + out]);
        }
    }
    y
}

pub fn center_crop_bwd(in_shape: (usize, usize, usize), out: usize, gy: &Tensor) -> Tensor {
    let (c, h, w) = in_shape;
    let oy = (h - out) / 2;
    let ox = (w - out) / 2;
    let mut gx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for r in 0..out {
            let dst = (ch * h + oy + r) * w + ox;
            let src = (ch * out + r) * out;
            gx.data_mut()[dst..dst + out].copy_from_slice(&gy.data()[src..src + out]);
        }
    }
    gx
}
