//! Dense layer primitives with hand-coded backward passes.
//!
//! Everything operates on `[batch, ...]` tensors. Gradients are the exact
//! closed forms; the straight-through surrogates live in `quant` and are
//! wired in by the model interpreter.

use crate::error::{invalid_arg, Result};
use crate::tensor::{gemm, gemm_bt, transpose, Tensor};

/// One shared batch-norm evaluation so every execution path rounds
/// identically: `gamma * ((x - mean) * inv) + shift` with
/// `inv = 1 / sqrt(var + eps)`.
#[inline]
pub fn bn_apply(x: f32, gamma: f32, shift: f32, mean: f32, inv: f32) -> f32 {
    gamma * ((x - mean) * inv) + shift
}

#[inline]
pub fn bn_inv(var: f32, eps: f32) -> f32 {
    1.0 / (var + eps).sqrt()
}

// ---- fully connected -----------------------------------------------------

/// `y = x W^T + b` for `x: [batch, in]`, `w: [out, in]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
    let batch = x.shape[0];
    let feat: usize = x.shape[1..].iter().product();
    if feat != in_dim {
        return Err(invalid_arg!("linear: input has {feat} features, weight wants {in_dim}"));
    }
    let mut y = vec![0.0f32; batch * out_dim];
    gemm_bt(&x.data, &w.data, &mut y, batch, in_dim, out_dim);
    if let Some(b) = b {
        for row in y.chunks_mut(out_dim) {
            for (v, &bv) in row.iter_mut().zip(&b.data) {
                *v += bv;
            }
        }
    }
    Tensor::from_vec(&[batch, out_dim], y)
}

/// Backward of [`linear_forward`]: returns `(dx, dw, db)`.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    want_bias: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
    let batch = x.shape[0];
    let mut dx = vec![0.0f32; batch * in_dim];
    gemm(&g.data, &w.data, &mut dx, batch, out_dim, in_dim);

    let mut gt = vec![0.0f32; batch * out_dim];
    transpose(&g.data, &mut gt, batch, out_dim);
    let mut dw = vec![0.0f32; out_dim * in_dim];
    gemm(&gt, &x.data, &mut dw, out_dim, batch, in_dim);

    let db = if want_bias {
        let mut db = vec![0.0f32; out_dim];
        for row in g.data.chunks(out_dim) {
            for (d, &gv) in db.iter_mut().zip(row) {
                *d += gv;
            }
        }
        Some(Tensor::from_vec(&[out_dim], db)?)
    } else {
        None
    };
    Ok((
        Tensor::from_vec(&x.shape, dx)?,
        Tensor::from_vec(&[out_dim, in_dim], dw)?,
        db,
    ))
}

// ---- 2-d convolution via im2col -------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn check(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(invalid_arg!("conv stride must be >= 1"));
        }
        if self.h + 2 * self.pad < self.kh || self.w + 2 * self.pad < self.kw {
            return Err(invalid_arg!("conv kernel larger than padded input"));
        }
        Ok(())
    }
}

/// Lower one batch into a `[batch*oh*ow, c_in*kh*kw]` patch matrix.
/// Patch order is (channel, kernel row, kernel col); padding taps are zero.
pub fn im2col(x: &Tensor, geom: &ConvGeom) -> Result<Tensor> {
    geom.check()?;
    let batch = x.shape[0];
    let (oh, ow) = geom.out_hw();
    let plen = geom.patch_len();
    let plane = geom.h * geom.w;
    let mut cols = vec![0.0f32; batch * oh * ow * plen];
    for b in 0..batch {
        let img = &x.data[b * geom.c_in * plane..(b + 1) * geom.c_in * plane];
        for orow in 0..oh {
            for ocol in 0..ow {
                let dst_base = ((b * oh + orow) * ow + ocol) * plen;
                for c in 0..geom.c_in {
                    for r in 0..geom.kh {
                        let ih = (orow * geom.stride + r) as isize - geom.pad as isize;
                        if ih < 0 || ih >= geom.h as isize {
                            continue;
                        }
                        for s in 0..geom.kw {
                            let iw = (ocol * geom.stride + s) as isize - geom.pad as isize;
                            if iw < 0 || iw >= geom.w as isize {
                                continue;
                            }
                            cols[dst_base + (c * geom.kh + r) * geom.kw + s] =
                                img[c * plane + ih as usize * geom.w + iw as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[batch * oh * ow, plen], cols)
}

/// Scatter-add a patch-matrix gradient back to input layout (inverse of im2col).
pub fn col2im(dcols: &Tensor, geom: &ConvGeom, batch: usize) -> Result<Tensor> {
    let (oh, ow) = geom.out_hw();
    let plen = geom.patch_len();
    let plane = geom.h * geom.w;
    let mut dx = vec![0.0f32; batch * geom.c_in * plane];
    for b in 0..batch {
        for orow in 0..oh {
            for ocol in 0..ow {
                let src_base = ((b * oh + orow) * ow + ocol) * plen;
                for c in 0..geom.c_in {
                    for r in 0..geom.kh {
                        let ih = (orow * geom.stride + r) as isize - geom.pad as isize;
                        if ih < 0 || ih >= geom.h as isize {
                            continue;
                        }
                        for s in 0..geom.kw {
                            let iw = (ocol * geom.stride + s) as isize - geom.pad as isize;
                            if iw < 0 || iw >= geom.w as isize {
                                continue;
                            }
                            dx[b * geom.c_in * plane + c * plane + ih as usize * geom.w + iw as usize] +=
                                dcols.data[src_base + (c * geom.kh + r) * geom.kw + s];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[batch, geom.c_in, geom.h, geom.w], dx)
}

/// Conv forward from a precomputed patch matrix: output `[batch, c_out, oh, ow]`.
pub fn conv_forward_from_cols(cols: &Tensor, w_flat: &Tensor, geom: &ConvGeom, batch: usize) -> Result<Tensor> {
    let (oh, ow) = geom.out_hw();
    let plen = geom.patch_len();
    let positions = batch * oh * ow;
    let mut tmp = vec![0.0f32; positions * geom.c_out];
    gemm_bt(&cols.data, &w_flat.data, &mut tmp, positions, plen, geom.c_out);
    // [b*P, c_out] -> [b, c_out, P]
    let p = oh * ow;
    let mut y = vec![0.0f32; batch * geom.c_out * p];
    for b in 0..batch {
        for pos in 0..p {
            for o in 0..geom.c_out {
                y[(b * geom.c_out + o) * p + pos] = tmp[(b * p + pos) * geom.c_out + o];
            }
        }
    }
    Tensor::from_vec(&[batch, geom.c_out, oh, ow], y)
}

/// Backward of the conv: returns `(dcols, dw_flat)`; `dx` follows via col2im.
pub fn conv_backward_to_cols(
    cols: &Tensor,
    w_flat: &Tensor,
    g: &Tensor,
    geom: &ConvGeom,
    batch: usize,
) -> Result<(Tensor, Tensor)> {
    let (oh, ow) = geom.out_hw();
    let p = oh * ow;
    let plen = geom.patch_len();
    let positions = batch * p;
    // [b, c_out, P] -> [b*P, c_out]
    let mut gflat = vec![0.0f32; positions * geom.c_out];
    for b in 0..batch {
        for o in 0..geom.c_out {
            for pos in 0..p {
                gflat[(b * p + pos) * geom.c_out + o] = g.data[(b * geom.c_out + o) * p + pos];
            }
        }
    }
    let mut dcols = vec![0.0f32; positions * plen];
    gemm(&gflat, &w_flat.data, &mut dcols, positions, geom.c_out, plen);

    let mut gt = vec![0.0f32; positions * geom.c_out];
    transpose(&gflat, &mut gt, positions, geom.c_out);
    let mut dw = vec![0.0f32; geom.c_out * plen];
    gemm(&gt, &cols.data, &mut dw, geom.c_out, positions, plen);

    Ok((
        Tensor::from_vec(&[positions, plen], dcols)?,
        Tensor::from_vec(&[geom.c_out, plen], dw)?,
    ))
}

// ---- batch normalization ---------------------------------------------------

/// Cached values from a training-mode BN pass needed by its backward.
pub struct BnCache {
    pub x_hat: Tensor,
    pub inv: Vec<f32>,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}

/// Training-mode BN over `x: [batch, C, S]` (S = spatial positions, 1 for
/// dense layers): per-channel batch statistics, biased variance.
pub fn bn_forward_train(
    x: &Tensor,
    gamma: &Tensor,
    shift: &Tensor,
    channels: usize,
    spatial: usize,
    eps: f32,
) -> Result<(Tensor, BnCache)> {
    let batch = x.shape[0];
    let n = (batch * spatial) as f64;
    if n == 0.0 {
        return Err(invalid_arg!("bn on empty batch"));
    }
    let mut mean = vec![0.0f32; channels];
    let mut var = vec![0.0f32; channels];
    for c in 0..channels {
        let mut acc = 0.0f64;
        for b in 0..batch {
            for s in 0..spatial {
                acc += x.data[(b * channels + c) * spatial + s] as f64;
            }
        }
        let m = acc / n;
        let mut vacc = 0.0f64;
        for b in 0..batch {
            for s in 0..spatial {
                let d = x.data[(b * channels + c) * spatial + s] as f64 - m;
                vacc += d * d;
            }
        }
        mean[c] = m as f32;
        var[c] = (vacc / n) as f32;
    }
    let inv: Vec<f32> = var.iter().map(|&v| bn_inv(v, eps)).collect();
    let mut x_hat = vec![0.0f32; x.numel()];
    let mut y = vec![0.0f32; x.numel()];
    for b in 0..batch {
        for c in 0..channels {
            for s in 0..spatial {
                let idx = (b * channels + c) * spatial + s;
                let xh = (x.data[idx] - mean[c]) * inv[c];
                x_hat[idx] = xh;
                y[idx] = gamma.data[c] * xh + shift.data[c];
            }
        }
    }
    Ok((
        Tensor::from_vec(&x.shape, y)?,
        BnCache {
            x_hat: Tensor::from_vec(&x.shape, x_hat)?,
            inv,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// BN backward; returns `(dx, dgamma, dshift)`.
pub fn bn_backward(
    cache: &BnCache,
    gamma: &Tensor,
    g: &Tensor,
    channels: usize,
    spatial: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let batch = g.shape[0];
    let n = (batch * spatial) as f64;
    let mut dgamma = vec![0.0f32; channels];
    let mut dshift = vec![0.0f32; channels];
    let mut sum_g = vec![0.0f64; channels];
    let mut sum_gx = vec![0.0f64; channels];
    for b in 0..batch {
        for c in 0..channels {
            for s in 0..spatial {
                let idx = (b * channels + c) * spatial + s;
                let gv = g.data[idx] as f64;
                sum_g[c] += gv;
                sum_gx[c] += gv * cache.x_hat.data[idx] as f64;
            }
        }
    }
    for c in 0..channels {
        dgamma[c] = sum_gx[c] as f32;
        dshift[c] = sum_g[c] as f32;
    }
    let mut dx = vec![0.0f32; g.numel()];
    for b in 0..batch {
        for c in 0..channels {
            let scale = gamma.data[c] as f64 * cache.inv[c] as f64;
            for s in 0..spatial {
                let idx = (b * channels + c) * spatial + s;
                let gv = g.data[idx] as f64;
                let xh = cache.x_hat.data[idx] as f64;
                dx[idx] = (scale * (gv - sum_g[c] / n - xh * sum_gx[c] / n)) as f32;
            }
        }
    }
    Ok((
        Tensor::from_vec(&g.shape, dx)?,
        Tensor::from_vec(&[channels], dgamma)?,
        Tensor::from_vec(&[channels], dshift)?,
    ))
}

/// Inference-mode BN with running statistics.
#[allow(clippy::too_many_arguments)]
pub fn bn_forward_infer(
    x: &Tensor,
    gamma: &Tensor,
    shift: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    channels: usize,
    spatial: usize,
    eps: f32,
) -> Result<Tensor> {
    let inv: Vec<f32> = var.data.iter().map(|&v| bn_inv(v, eps)).collect();
    let mut y = vec![0.0f32; x.numel()];
    for (j, yv) in y.iter_mut().enumerate() {
        let c = (j % (channels * spatial)) / spatial;
        *yv = bn_apply(x.data[j], gamma.data[c], shift.data[c], mean.data[c], inv[c]);
    }
    Tensor::from_vec(&x.shape, y)
}

// ---- pooling, relu, loss ---------------------------------------------------

/// Max-pool over `[batch, C, h, w]`; ties go to the first maximum so the
/// backward routing is deterministic. Returns `(y, argmax)` with flat input
/// indices per output element.
pub fn maxpool_forward(
    x: &Tensor,
    channels: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(invalid_arg!("bad pooling geometry"));
    }
    let batch = x.shape[0];
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut y = vec![0.0f32; batch * channels * oh * ow];
    let mut arg = vec![0usize; y.len()];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * h * w;
            for orow in 0..oh {
                for ocol in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for r in 0..window {
                        for s in 0..window {
                            let idx = base + (orow * stride + r) * w + ocol * stride + s;
                            if x.data[idx] > best {
                                best = x.data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let oidx = ((b * channels + c) * oh + orow) * ow + ocol;
                    y[oidx] = best;
                    arg[oidx] = best_idx;
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[batch, channels, oh, ow], y)?, arg))
}

pub fn maxpool_backward(g: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    let mut dx = vec![0.0f32; input_shape.iter().product()];
    for (gv, &idx) in g.data.iter().zip(argmax) {
        dx[idx] += gv;
    }
    Tensor::from_vec(input_shape, dx)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, g: &Tensor) -> Tensor {
    Tensor {
        shape: g.shape.clone(),
        data: g
            .data
            .iter()
            .zip(&x.data)
            .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
            .collect(),
    }
}

/// Mean softmax cross-entropy over the batch; returns `(loss, dlogits)`.
/// The reduction runs in f64 so finite-difference checks stay clean.
pub fn softmax_xent(logits: &Tensor, labels: &[u32]) -> Result<(f32, Tensor)> {
    let batch = logits.shape[0];
    let classes = logits.shape[1];
    if labels.len() != batch {
        return Err(invalid_arg!("{batch} logit rows vs {} labels", labels.len()));
    }
    let mut loss = 0.0f64;
    let mut dlogits = vec![0.0f32; logits.numel()];
    for (b, &label) in labels.iter().enumerate() {
        if label as usize >= classes {
            return Err(invalid_arg!("label {label} out of range 0..{classes}"));
        }
        let row = &logits.data[b * classes..(b + 1) * classes];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v as f64) - max).exp();
        }
        let logp = (row[label as usize] as f64 - max) - denom.ln();
        loss -= logp;
        for (j, &v) in row.iter().enumerate() {
            let p = ((v as f64 - max).exp() / denom) as f32;
            let target = if j == label as usize { 1.0 } else { 0.0 };
            dlogits[b * classes + j] = (p - target) / batch as f32;
        }
    }
    Ok((
        (loss / batch as f64) as f32,
        Tensor::from_vec(&logits.shape, dlogits)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::he_init;

    #[test]
    fn linear_forward_hand_case() {
        let x = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, -1.0, 2.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let y = linear_forward(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data, vec![-0.5, 5.5]);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input channel
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let geom = ConvGeom { c_in: 1, h: 2, w: 2, c_out: 1, kh: 1, kw: 1, stride: 1, pad: 0 };
        let wf = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let cols = im2col(&x, &geom).unwrap();
        let y = conv_forward_from_cols(&cols, &wf, &geom, 1).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let x = he_init(&[2, 2, 5, 5], 50, 1).unwrap();
        let geom = ConvGeom { c_in: 2, h: 5, w: 5, c_out: 3, kh: 3, kw: 3, stride: 1, pad: 1 };
        let wf = he_init(&[3, 18], 18, 2).unwrap();
        let cols = im2col(&x, &geom).unwrap();
        let y = conv_forward_from_cols(&cols, &wf, &geom, 2).unwrap();
        // direct nested-loop oracle
        for b in 0..2 {
            for o in 0..3 {
                for orow in 0..5i32 {
                    for ocol in 0..5i32 {
                        let mut acc = 0.0f32;
                        for c in 0..2usize {
                            for r in 0..3i32 {
                                for s in 0..3i32 {
                                    let (ih, iw) = (orow + r - 1, ocol + s - 1);
                                    if !(0..5).contains(&ih) || !(0..5).contains(&iw) {
                                        continue;
                                    }
                                    acc += x.data[((b * 2 + c) * 5 + ih as usize) * 5 + iw as usize]
                                        * wf.data[o * 18 + (c * 3 + r as usize) * 3 + s as usize];
                                }
                            }
                        }
                        let got = y.data[((b * 3 + o) * 5 + orow as usize) * 5 + ocol as usize];
                        assert!((got - acc).abs() < 1e-4, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn bn_train_normalizes() {
        let x = he_init(&[16, 4, 1], 4, 3).unwrap();
        let gamma = Tensor::from_vec(&[4], vec![1.0; 4]).unwrap();
        let shift = Tensor::zeros(&[4]);
        let (y, _) = bn_forward_train(&x, &gamma, &shift, 4, 1, 1e-5).unwrap();
        for c in 0..4 {
            let vals: Vec<f32> = (0..16).map(|b| y.data[b * 4 + c]).collect();
            let mean: f32 = vals.iter().sum::<f32>() / 16.0;
            let var: f32 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 5.0, 2.0, 3.0]).unwrap();
        let (y, arg) = maxpool_forward(&x, 1, 2, 2, 2, 2).unwrap();
        assert_eq!(y.data, vec![5.0]);
        let g = Tensor::from_vec(&[1, 1, 1, 1], vec![7.0]).unwrap();
        let dx = maxpool_backward(&g, &arg, &[1, 1, 2, 2]).unwrap();
        assert_eq!(dx.data, vec![0.0, 7.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_xent_uniform_logits() {
        let logits = Tensor::zeros(&[2, 4]);
        let (loss, d) = softmax_xent(&logits, &[0, 3]).unwrap();
        assert!((loss - (4.0f32).ln()).abs() < 1e-6);
        // gradient rows sum to zero
        for b in 0..2 {
            let s: f32 = d.data[b * 4..(b + 1) * 4].iter().sum();
            assert!(s.abs() < 1e-6);
        }
    }
}
