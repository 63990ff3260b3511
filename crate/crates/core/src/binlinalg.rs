//! Bitwise linear algebra: XNOR- and AND-popcount dot products, packed
//! matrix-vector products, convolution lowered to packed patch products,
//! and binary (OR) max-pooling.
//!
//! All kernels are exact: packed results equal the integer dot products of
//! the decoded operands for every input, with no tolerance.

use crate::bitplane::BitPlane;
use crate::error::{invalid_arg, Result};
use crate::quant::{QuantizedWeight, SplitActivation};
use crate::tensor::Tensor;

/// How the digital bits of a plane decode to values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    /// bit b decodes to b (activations).
    ZeroOne,
    /// bit b decodes to 2b - 1 (weights).
    PlusMinusOne,
}

/// Which popcount kernel a packed product uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// `{0,1}` activations against `{-1,+1}` weights.
    And,
    /// `{-1,+1}` activations against `{-1,+1}` weights.
    Xnor,
}

/// Row-packed binary matrix; one canonical plane per row.
#[derive(Clone, Debug)]
pub struct PackedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub planes: Vec<BitPlane>,
    pub encoding: Encoding,
}

impl PackedMatrix {
    pub fn new(rows: usize, cols: usize, planes: Vec<BitPlane>, encoding: Encoding) -> Result<Self> {
        if planes.len() != rows {
            return Err(invalid_arg!("expected {rows} row planes, got {}", planes.len()));
        }
        for p in &planes {
            if p.len() != cols {
                return Err(invalid_arg!("row plane length {} != cols {cols}", p.len()));
            }
        }
        Ok(PackedMatrix {
            rows,
            cols,
            planes,
            encoding,
        })
    }

    /// Re-pack a flat row-major plane of `rows * cols` bits into row planes.
    pub fn from_flat_plane(
        flat: &BitPlane,
        rows: usize,
        cols: usize,
        encoding: Encoding,
    ) -> Result<Self> {
        if flat.len() != rows * cols {
            return Err(invalid_arg!(
                "flat plane has {} bits, expected {rows}x{cols}",
                flat.len()
            ));
        }
        let planes = (0..rows)
            .map(|r| BitPlane::from_fn(cols, |j| flat.get(r * cols + j)))
            .collect();
        Self::new(rows, cols, planes, encoding)
    }
}

/// Integer dot product of two `{-1,+1}` vectors from their digital planes:
/// matches minus mismatches, i.e. `2 * popcount(XNOR) - N`.
///
/// Padding bits XNOR to 1, so popcounts run over full words and the
/// `64*words - N` spurious matches are subtracted.
pub fn xnor_dot(x: &BitPlane, w: &BitPlane) -> Result<i32> {
    if x.len() != w.len() {
        return Err(invalid_arg!("xnor_dot length mismatch: {} vs {}", x.len(), w.len()));
    }
    let mut matches = 0usize;
    for (a, b) in x.words().iter().zip(w.words()) {
        matches += (!(a ^ b)).count_ones() as usize;
    }
    matches -= x.padding_bits();
    Ok(2 * matches as i32 - x.len() as i32)
}

/// Integer dot product of a `{0,1}` activation vector with a `{-1,+1}`
/// weight vector: `2 * popcount(AND) - popcount(x)`.
///
/// `x_ones` must equal `x.popcount()`; it is taken as a parameter so one
/// popcount can be reused across every row of a matrix product.
pub fn and_dot(x: &BitPlane, w: &BitPlane, x_ones: usize) -> Result<i32> {
    if x.len() != w.len() {
        return Err(invalid_arg!("and_dot length mismatch: {} vs {}", x.len(), w.len()));
    }
    debug_assert_eq!(x_ones, x.popcount(), "x_ones inconsistent with x");
    let mut p = 0usize;
    for (a, b) in x.words().iter().zip(w.words()) {
        p += (a & b).count_ones() as usize;
    }
    Ok(2 * p as i32 - x_ones as i32)
}

/// Packed matrix-vector product; row i is the selected kernel applied to
/// row plane i and x. In AND mode the activation popcount is computed once
/// for the whole call.
pub fn packed_matvec(w: &PackedMatrix, x: &BitPlane, mode: Mode) -> Result<Vec<i32>> {
    if w.cols != x.len() {
        return Err(invalid_arg!(
            "packed_matvec dims mismatch: W is {}x{}, x has {}",
            w.rows,
            w.cols,
            x.len()
        ));
    }
    if w.encoding != Encoding::PlusMinusOne {
        return Err(invalid_arg!("packed_matvec needs plus_minus_one weights"));
    }
    match mode {
        Mode::And => {
            let ones = x.popcount();
            w.planes.iter().map(|p| and_dot(x, p, ones)).collect()
        }
        Mode::Xnor => w.planes.iter().map(|p| xnor_dot(x, p)).collect(),
    }
}

/// Prepared packed form of a quantized weight matrix: one row-packed
/// matrix per weight plane, most significant plane first.
pub fn pack_weight_matrix(w: &QuantizedWeight, rows: usize, cols: usize) -> Result<Vec<PackedMatrix>> {
    if w.numel() != rows * cols {
        return Err(invalid_arg!(
            "weight has {} elements, expected {rows}x{cols}",
            w.numel()
        ));
    }
    w.planes
        .iter()
        .map(|p| PackedMatrix::from_flat_plane(p, rows, cols, Encoding::PlusMinusOne))
        .collect()
}

/// Combine per-plane integer accumulators into one:
/// `sum_l 2^(n-l) * acc_l`. With the fused scale `beta * alpha / (2^n - 1)`
/// this reproduces `beta * alpha * sum_l gamma_l * acc_l` exactly.
#[inline]
fn shift_combine(per_plane: &[i32], n: usize) -> i32 {
    let mut acc = 0i32;
    for (l, v) in per_plane.iter().enumerate() {
        acc += v << (n - 1 - l);
    }
    acc
}

/// Bitwise fully-connected layer: for every activation bit path i,
/// `Y_i = beta_i * alpha * sum_l gamma_l * (W_l . X_i)` as a dense tensor.
/// The k outputs are not summed across paths.
pub fn bitwise_linear(x: &SplitActivation, w: &QuantizedWeight) -> Result<Vec<Tensor>> {
    if w.shape.len() != 2 {
        return Err(invalid_arg!("bitwise_linear expects 2-d weights, got {:?}", w.shape));
    }
    let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
    let n_in: usize = x.shape.iter().product();
    if n_in != in_dim {
        return Err(invalid_arg!(
            "bitwise_linear dims mismatch: weight cols {in_dim}, input {n_in}"
        ));
    }
    let packed = pack_weight_matrix(w, out_dim, in_dim)?;
    let mut outputs = Vec::with_capacity(x.k);
    for (plane, &b) in x.planes.iter().zip(&x.betas) {
        let per_plane: Vec<Vec<i32>> = packed
            .iter()
            .map(|m| packed_matvec(m, plane, Mode::And))
            .collect::<Result<_>>()?;
        let scale = w.fused_scale(b);
        let data = (0..out_dim)
            .map(|r| {
                let accs: Vec<i32> = per_plane.iter().map(|v| v[r]).collect();
                scale * shift_combine(&accs, w.n) as f32
            })
            .collect();
        outputs.push(Tensor::from_vec(&[out_dim], data)?);
    }
    Ok(outputs)
}

/// Patch planes for a packed convolution: one plane per output position,
/// bits ordered (channel, kernel row, kernel col). Out-of-bounds taps are
/// zero, so spatial zero-padding contributes nothing in AND mode.
#[allow(clippy::too_many_arguments)]
pub fn extract_patches(
    plane: &BitPlane,
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Vec<BitPlane>> {
    if plane.len() != channels * height * width {
        return Err(invalid_arg!(
            "plane has {} bits, expected {channels}x{height}x{width}",
            plane.len()
        ));
    }
    if stride == 0 {
        return Err(invalid_arg!("stride must be >= 1"));
    }
    if height + 2 * pad < kh || width + 2 * pad < kw {
        return Err(invalid_arg!("kernel larger than padded input"));
    }
    let oh = (height + 2 * pad - kh) / stride + 1;
    let ow = (width + 2 * pad - kw) / stride + 1;
    let patch_len = channels * kh * kw;
    let mut patches = Vec::with_capacity(oh * ow);
    for out_r in 0..oh {
        for out_c in 0..ow {
            let patch = BitPlane::from_fn(patch_len, |j| {
                let c = j / (kh * kw);
                let r = (j / kw) % kh;
                let s = j % kw;
                let ih = (out_r * stride + r) as isize - pad as isize;
                let iw = (out_c * stride + s) as isize - pad as isize;
                if ih < 0 || iw < 0 || ih >= height as isize || iw >= width as isize {
                    false
                } else {
                    plane.get(c * height * width + ih as usize * width + iw as usize)
                }
            });
            patches.push(patch);
        }
    }
    Ok(patches)
}

/// Bitwise 2-d convolution, lowered to packed patch products.
///
/// Input planes cover `[c_in, h, w]` row-major; weights are
/// `[c_out, c_in, kh, kw]`. Per path i the output is a dense
/// `[c_out, oh, ow]` tensor with the same scaling as [`bitwise_linear`].
pub fn bitwise_conv2d(
    x: &SplitActivation,
    w: &QuantizedWeight,
    stride: usize,
    pad: usize,
) -> Result<Vec<Tensor>> {
    if x.shape.len() != 3 {
        return Err(invalid_arg!("conv input must be [c,h,w], got {:?}", x.shape));
    }
    if w.shape.len() != 4 {
        return Err(invalid_arg!("conv weight must be [co,ci,kh,kw], got {:?}", w.shape));
    }
    let (c_in, h, width) = (x.shape[0], x.shape[1], x.shape[2]);
    let (c_out, wc_in, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    if c_in != wc_in {
        return Err(invalid_arg!("conv channel mismatch: input {c_in}, weight {wc_in}"));
    }
    if stride == 0 {
        return Err(invalid_arg!("stride must be >= 1"));
    }
    if h + 2 * pad < kh || width + 2 * pad < kw {
        return Err(invalid_arg!("kernel larger than padded input"));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (width + 2 * pad - kw) / stride + 1;
    let patch_len = c_in * kh * kw;

    // Weight rows in patch order: the flat plane is already
    // [c_out, c_in, kh, kw] row-major, so row o is one contiguous range.
    let weight_rows: Vec<PackedMatrix> = pack_weight_matrix(w, c_out, patch_len)?;

    let mut outputs = Vec::with_capacity(x.k);
    for (plane, &b) in x.planes.iter().zip(&x.betas) {
        // Patches packed once per invocation; popcounts cached and reused
        // across all output channels and weight planes.
        let patches = extract_patches(plane, c_in, h, width, kh, kw, stride, pad)?;
        let ones: Vec<usize> = patches.iter().map(|p| p.popcount()).collect();
        let scale = w.fused_scale(b);
        let mut data = vec![0.0f32; c_out * oh * ow];
        for o in 0..c_out {
            for (pos, patch) in patches.iter().enumerate() {
                let mut acc = 0i32;
                for (l, m) in weight_rows.iter().enumerate() {
                    let d = and_dot(patch, &m.planes[o], ones[pos])?;
                    acc += d << (w.n - 1 - l);
                }
                data[o * oh * ow + pos] = scale * acc as f32;
            }
        }
        outputs.push(Tensor::from_vec(&[c_out, oh, ow], data)?);
    }
    Ok(outputs)
}

/// Binary max-pool over one `h x w` plane: OR over each window.
pub fn binary_maxpool(
    p: &BitPlane,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> Result<BitPlane> {
    if p.len() != h * w {
        return Err(invalid_arg!("plane has {} bits, expected {h}x{w}", p.len()));
    }
    if window == 0 || stride == 0 {
        return Err(invalid_arg!("window and stride must be >= 1"));
    }
    if window > h || window > w {
        return Err(invalid_arg!("window {window} larger than input {h}x{w}"));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    Ok(BitPlane::from_fn(oh * ow, |j| {
        let (out_r, out_c) = (j / ow, j % ow);
        for r in 0..window {
            for s in 0..window {
                if p.get((out_r * stride + r) * w + out_c * stride + s) {
                    return true;
                }
            }
        }
        false
    }))
}

/// Channel-wise binary max-pool over a `[c, h, w]` plane.
#[allow(clippy::too_many_arguments)]
pub fn binary_maxpool_chw(
    p: &BitPlane,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> Result<BitPlane> {
    if p.len() != c * h * w {
        return Err(invalid_arg!("plane has {} bits, expected {c}x{h}x{w}", p.len()));
    }
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(invalid_arg!("bad pooling geometry"));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut pooled = Vec::with_capacity(c);
    for ch in 0..c {
        let channel = BitPlane::from_fn(h * w, |j| p.get(ch * h * w + j));
        pooled.push(binary_maxpool(&channel, h, w, window, stride)?);
    }
    Ok(BitPlane::from_fn(c * oh * ow, |j| {
        pooled[j / (oh * ow)].get(j % (oh * ow))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{bit_split, quantize_weights};
    use crate::tensor::he_init;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plus_minus(bits: &[u8]) -> Vec<i32> {
        bits.iter().map(|&b| 2 * b as i32 - 1).collect()
    }

    #[test]
    fn xnor_dot_hand_case() {
        // decoded x=[+1,-1], w=[-1,-1]: XNOR bits [0,1], 2 - 2*1 = 0
        let x = BitPlane::pack(&[1, 0]).unwrap();
        let w = BitPlane::pack(&[0, 0]).unwrap();
        assert_eq!(xnor_dot(&x, &w).unwrap(), 0);
    }

    #[test]
    fn xnor_dot_self_similarity() {
        let bits: Vec<u8> = (0..137).map(|j| (j % 3 == 0) as u8).collect();
        let x = BitPlane::pack(&bits).unwrap();
        assert_eq!(xnor_dot(&x, &x).unwrap(), 137);
    }

    #[test]
    fn xnor_dot_matches_decoded_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let bits_x: Vec<u8> = (0..200).map(|_| rng.gen_range(0..=1)).collect();
            let bits_w: Vec<u8> = (0..200).map(|_| rng.gen_range(0..=1)).collect();
            let expect: i32 = plus_minus(&bits_x)
                .iter()
                .zip(plus_minus(&bits_w))
                .map(|(a, b)| a * b)
                .sum();
            let x = BitPlane::pack(&bits_x).unwrap();
            let w = BitPlane::pack(&bits_w).unwrap();
            assert_eq!(xnor_dot(&x, &w).unwrap(), expect);
        }
    }

    #[test]
    fn and_dot_hand_case() {
        // x=[0,1,1,0], w decoded=[-1,+1,+1,+1]: 2*2 - 2 = 2
        let x = BitPlane::pack(&[0, 1, 1, 0]).unwrap();
        let w = BitPlane::pack(&[0, 1, 1, 1]).unwrap();
        assert_eq!(and_dot(&x, &w, x.popcount()).unwrap(), 2);
    }

    #[test]
    fn and_dot_zero_activation() {
        let x = BitPlane::zeros(91);
        let w = BitPlane::from_fn(91, |j| j % 2 == 0);
        assert_eq!(and_dot(&x, &w, 0).unwrap(), 0);
    }

    #[test]
    fn and_dot_matches_decoded_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let bits_x: Vec<u8> = (0..500).map(|_| rng.gen_range(0..=1)).collect();
            let bits_w: Vec<u8> = (0..500).map(|_| rng.gen_range(0..=1)).collect();
            let expect: i32 = bits_x
                .iter()
                .zip(plus_minus(&bits_w))
                .map(|(&a, b)| a as i32 * b)
                .sum();
            let x = BitPlane::pack(&bits_x).unwrap();
            let w = BitPlane::pack(&bits_w).unwrap();
            assert_eq!(and_dot(&x, &w, x.popcount()).unwrap(), expect);
        }
    }

    #[test]
    fn kernels_reject_length_mismatch() {
        let a = BitPlane::zeros(10);
        let b = BitPlane::zeros(11);
        assert!(xnor_dot(&a, &b).is_err());
        assert!(and_dot(&a, &b, 0).is_err());
    }

    #[test]
    fn matvec_rows_equal_to_x_give_popcount() {
        let bits: Vec<u8> = (0..70).map(|j| (j % 5 != 0) as u8).collect();
        let x = BitPlane::pack(&bits).unwrap();
        let rows = vec![x.clone(); 4];
        let m = PackedMatrix::new(4, 70, rows, Encoding::PlusMinusOne).unwrap();
        let y = packed_matvec(&m, &x, Mode::And).unwrap();
        // decoded oracle: w_j = +1 exactly where x_j = 1, so dot = popcount(x)
        for v in y {
            assert_eq!(v as usize, x.popcount());
        }
    }

    #[test]
    fn matvec_matches_dense_oracle_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xb: Vec<u8> = (0..8).map(|_| rng.gen_range(0..=1)).collect();
        let wb: Vec<Vec<u8>> = (0..8)
            .map(|_| (0..8).map(|_| rng.gen_range(0..=1)).collect())
            .collect();
        let x = BitPlane::pack(&xb).unwrap();
        let planes = wb.iter().map(|r| BitPlane::pack(r).unwrap()).collect();
        let m = PackedMatrix::new(8, 8, planes, Encoding::PlusMinusOne).unwrap();
        let y = packed_matvec(&m, &x, Mode::And).unwrap();
        for (i, row) in wb.iter().enumerate() {
            let expect: i32 = xb
                .iter()
                .zip(plus_minus(row))
                .map(|(&a, b)| a as i32 * b)
                .sum();
            assert_eq!(y[i], expect);
        }
    }

    #[test]
    fn matvec_xnor_mode_matches_decoded_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xb: Vec<u8> = (0..90).map(|_| rng.gen_range(0..=1)).collect();
        let x = BitPlane::pack(&xb).unwrap();
        let rows: Vec<Vec<u8>> = (0..5)
            .map(|_| (0..90).map(|_| rng.gen_range(0..=1)).collect())
            .collect();
        let planes = rows.iter().map(|r| BitPlane::pack(r).unwrap()).collect();
        let m = PackedMatrix::new(5, 90, planes, Encoding::PlusMinusOne).unwrap();
        let y = packed_matvec(&m, &x, Mode::Xnor).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let expect: i32 = plus_minus(&xb)
                .iter()
                .zip(plus_minus(row))
                .map(|(a, b)| a * b)
                .sum();
            assert_eq!(y[i], expect);
        }
    }

    #[test]
    fn matvec_rejects_activation_encoded_matrix() {
        let m = PackedMatrix::new(2, 8, vec![BitPlane::zeros(8); 2], Encoding::ZeroOne).unwrap();
        let x = BitPlane::zeros(8);
        assert!(packed_matvec(&m, &x, Mode::And).is_err());
        assert!(packed_matvec(&m, &x, Mode::Xnor).is_err());
    }

    #[test]
    fn bitwise_linear_degenerates_to_matvec() {
        // k=1, n=1, alpha=1: reduces to packed_matvec in AND mode.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xv: Vec<f32> = (0..48).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = bit_split(&Tensor::from_vec(&[48], xv).unwrap(), 1).unwrap();
        let mut wv: Vec<f32> = (0..6 * 48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // force alpha = mean(|w|) = 1 by scaling
        let mean_abs: f32 = wv.iter().map(|v| v.abs()).sum::<f32>() / wv.len() as f32;
        wv.iter_mut().for_each(|v| *v /= mean_abs);
        let qw = quantize_weights(&Tensor::from_vec(&[6, 48], wv).unwrap(), 1).unwrap();
        assert!((qw.alpha - 1.0).abs() < 1e-5);

        let y = bitwise_linear(&x, &qw).unwrap();
        assert_eq!(y.len(), 1);
        let packed = pack_weight_matrix(&qw, 6, 48).unwrap();
        let raw = packed_matvec(&packed[0], &x.planes[0], Mode::And).unwrap();
        for (a, &b) in y[0].data.iter().zip(&raw) {
            assert!((a - qw.alpha * b as f32).abs() < 1e-5);
        }
    }

    #[test]
    fn bitwise_linear_matches_dequantized_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv: Vec<f32> = (0..32).map(|_| rng.gen_range(-0.3..1.3)).collect();
        let xt = Tensor::from_vec(&[32], xv).unwrap();
        let split = bit_split(&xt, 2).unwrap();
        let w = he_init(&[10, 32], 32, 17).unwrap();
        let qw = quantize_weights(&w, 2).unwrap();

        let got = bitwise_linear(&split, &qw).unwrap();
        let deq = qw.dequantize();
        for (i, y) in got.iter().enumerate() {
            // oracle: dense float matvec of dequantized weights against the
            // beta-scaled activation plane
            for r in 0..10 {
                let mut expect = 0.0f32;
                for j in 0..32 {
                    let xbit = if split.planes[i].get(j) { split.betas[i] } else { 0.0 };
                    expect += deq.data[r * 32 + j] * xbit;
                }
                assert!(
                    (y.data[r] - expect).abs() < 1e-5,
                    "path {i} row {r}: {} vs {expect}",
                    y.data[r]
                );
            }
        }
    }

    #[test]
    fn bitwise_linear_zero_activations() {
        let x = bit_split(&Tensor::zeros(&[16]), 2).unwrap();
        let w = he_init(&[4, 16], 16, 3).unwrap();
        let qw = quantize_weights(&w, 1).unwrap();
        for y in bitwise_linear(&x, &qw).unwrap() {
            assert!(y.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn conv_1x1_equals_linear_per_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xv: Vec<f32> = (0..3 * 4 * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let xt = Tensor::from_vec(&[3, 4, 4], xv).unwrap();
        let split = bit_split(&xt, 2).unwrap();
        let w = he_init(&[5, 3, 1, 1], 3, 8).unwrap();
        let qw = quantize_weights(&w, 1).unwrap();
        let conv = bitwise_conv2d(&split, &qw, 1, 0).unwrap();

        // same weights viewed as a dense [5,3] matrix applied per pixel
        let deq = qw.dequantize();
        for (i, y) in conv.iter().enumerate() {
            assert_eq!(y.shape, vec![5, 4, 4]);
            for o in 0..5 {
                for pix in 0..16 {
                    let mut expect = 0.0f32;
                    for c in 0..3 {
                        let xbit = if split.planes[i].get(c * 16 + pix) {
                            split.betas[i]
                        } else {
                            0.0
                        };
                        expect += deq.data[o * 3 + c] * xbit;
                    }
                    let got = y.data[o * 16 + pix];
                    assert!((got - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn conv_3x3_pad1_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xv: Vec<f32> = (0..2 * 5 * 5).map(|_| rng.gen_range(-0.2..1.2)).collect();
        let xt = Tensor::from_vec(&[2, 5, 5], xv).unwrap();
        let split = bit_split(&xt, 2).unwrap();
        let w = he_init(&[4, 2, 3, 3], 18, 9).unwrap();
        let qw = quantize_weights(&w, 2).unwrap();
        let got = bitwise_conv2d(&split, &qw, 1, 1).unwrap();
        let deq = qw.dequantize();

        for (i, y) in got.iter().enumerate() {
            assert_eq!(y.shape, vec![4, 5, 5]);
            for o in 0..4 {
                for out_r in 0..5i32 {
                    for out_c in 0..5i32 {
                        let mut expect = 0.0f32;
                        for c in 0..2 {
                            for r in 0..3i32 {
                                for s in 0..3i32 {
                                    let (ih, iw) = (out_r + r - 1, out_c + s - 1);
                                    if !(0..5).contains(&ih) || !(0..5).contains(&iw) {
                                        continue;
                                    }
                                    let j = c * 25 + ih as usize * 5 + iw as usize;
                                    let xbit = if split.planes[i].get(j) {
                                        split.betas[i]
                                    } else {
                                        0.0
                                    };
                                    let widx =
                                        ((o * 2 + c) * 3 + r as usize) * 3 + s as usize;
                                    expect += deq.data[widx] * xbit;
                                }
                            }
                        }
                        let gotv = y.data[(o * 5 + out_r as usize) * 5 + out_c as usize];
                        assert!(
                            (gotv - expect).abs() < 1e-5,
                            "path {i} o={o} ({out_r},{out_c}): {gotv} vs {expect}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv_zero_input_zero_output() {
        let split = bit_split(&Tensor::zeros(&[2, 6, 6]), 3).unwrap();
        let w = he_init(&[3, 2, 3, 3], 18, 10).unwrap();
        let qw = quantize_weights(&w, 1).unwrap();
        for y in bitwise_conv2d(&split, &qw, 1, 0).unwrap() {
            assert!(y.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn maxpool_or_semantics() {
        let zeros = BitPlane::zeros(16);
        let pooled = binary_maxpool(&zeros, 4, 4, 2, 2).unwrap();
        assert_eq!(pooled.popcount(), 0);

        // bit at (row 1, col 1) lands in the top-left 2x2 window
        let one_hot = BitPlane::from_fn(16, |j| j == 5);
        let pooled = binary_maxpool(&one_hot, 4, 4, 2, 2).unwrap();
        assert_eq!(pooled.unpack(), vec![1, 0, 0, 0]);
    }

    #[test]
    fn maxpool_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bits: Vec<u8> = (0..36).map(|_| rng.gen_range(0..=1)).collect();
        let p = BitPlane::pack(&bits).unwrap();
        let pooled = binary_maxpool(&p, 6, 6, 2, 2).unwrap();
        for out_r in 0..3 {
            for out_c in 0..3 {
                let mut m = 0u8;
                for r in 0..2 {
                    for s in 0..2 {
                        m = m.max(bits[(out_r * 2 + r) * 6 + out_c * 2 + s]);
                    }
                }
                assert_eq!(pooled.get(out_r * 3 + out_c) as u8, m);
            }
        }
    }

    #[test]
    fn maxpool_rejects_oversized_window() {
        let p = BitPlane::zeros(16);
        assert!(binary_maxpool(&p, 4, 4, 5, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        // Exactness for all lengths, including non-multiples of 64.
        #[test]
        fn kernels_exact_at_any_length(
            len in 1usize..1000,
            seed in 0u64..1_000_000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bits_x: Vec<u8> = (0..len).map(|_| rng.gen_range(0..=1)).collect();
            let bits_w: Vec<u8> = (0..len).map(|_| rng.gen_range(0..=1)).collect();
            let x = BitPlane::pack(&bits_x).unwrap();
            let w = BitPlane::pack(&bits_w).unwrap();

            let and_expect: i32 = bits_x.iter().zip(plus_minus(&bits_w))
                .map(|(&a, b)| a as i32 * b).sum();
            prop_assert_eq!(and_dot(&x, &w, x.popcount()).unwrap(), and_expect);

            let xnor_expect: i32 = plus_minus(&bits_x).iter().zip(plus_minus(&bits_w))
                .map(|(a, b)| a * b).sum();
            prop_assert_eq!(xnor_dot(&x, &w).unwrap(), xnor_expect);
        }

        // Appending zero activations never changes an AND-mode result,
        // whatever weight bits sit above them.
        #[test]
        fn and_padding_neutrality(
            len in 1usize..200,
            extra in 1usize..64,
            seed in 0u64..1_000_000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bits_x: Vec<u8> = (0..len).map(|_| rng.gen_range(0..=1)).collect();
            let mut bits_w: Vec<u8> = (0..len).map(|_| rng.gen_range(0..=1)).collect();
            let x = BitPlane::pack(&bits_x).unwrap();
            let w = BitPlane::pack(&bits_w).unwrap();
            let base = and_dot(&x, &w, x.popcount()).unwrap();

            bits_x.extend(std::iter::repeat_n(0, extra));
            bits_w.extend((0..extra).map(|_| rng.gen_range(0..=1u8)));
            let x2 = BitPlane::pack(&bits_x).unwrap();
            let w2 = BitPlane::pack(&bits_w).unwrap();
            prop_assert_eq!(and_dot(&x2, &w2, x2.popcount()).unwrap(), base);
        }

        // Eq. 6 via Eq. 7 algebra: for ±1 activations x with digital bits xb,
        // x.w == 2*(xb.w) - sum(w).
        #[test]
        fn xnor_consistent_with_and_formulation(
            len in 1usize..300,
            seed in 0u64..1_000_000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bits_x: Vec<u8> = (0..len).map(|_| rng.gen_range(0..=1)).collect();
            let bits_w: Vec<u8> = (0..len).map(|_| rng.gen_range(0..=1)).collect();
            let x = BitPlane::pack(&bits_x).unwrap();
            let w = BitPlane::pack(&bits_w).unwrap();
            let via_xnor = xnor_dot(&x, &w).unwrap();
            let sum_w = 2 * w.popcount() as i32 - len as i32;
            let via_and = 2 * and_dot(&x, &w, x.popcount()).unwrap() - sum_w;
            prop_assert_eq!(via_xnor, via_and);
        }
    }
}
