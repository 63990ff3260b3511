//! Quantization math: bit splitting of activations into binary planes,
//! binary activations with bit-weight factors, bit merging, their
//! straight-through backward passes, uniform weight quantization, and
//! batch-norm threshold folding.

use crate::bitplane::BitPlane;
use crate::error::{invalid_arg, Result};
use crate::tensor::Tensor;

/// Highest supported bit count for activations and weights.
pub const MAX_BITS: usize = 4;

/// Bit-weight factor for bit `i` (1-based, MSB = 1) of a `k`-bit code:
/// `2^(k-i) / (2^k - 1)`. The factors sum to exactly 1.
pub fn beta(i: usize, k: usize) -> f32 {
    debug_assert!(i >= 1 && i <= k);
    (1u32 << (k - i)) as f32 / ((1u32 << k) - 1) as f32
}

/// All k bit-weight factors, MSB first.
pub fn betas(k: usize) -> Vec<f32> {
    (1..=k).map(|i| beta(i, k)).collect()
}

fn check_bits(label: &str, v: usize) -> Result<()> {
    if !(1..=MAX_BITS).contains(&v) {
        return Err(invalid_arg!("{label} must be in [1, {MAX_BITS}], got {v}"));
    }
    Ok(())
}

/// A tensor split into k binary planes, MSB first, with bit-weight factors.
///
/// `planes[i]` holds the (i+1)-th most significant bit of every element;
/// merging with `betas` reconstructs the quantized tensor.
#[derive(Clone, Debug)]
pub struct SplitActivation {
    pub planes: Vec<BitPlane>,
    pub betas: Vec<f32>,
    pub k: usize,
    /// Shape of the tensor the planes were split from.
    pub shape: Vec<usize>,
}

/// The quantization codes behind `bit_split`: per element, clamp to [0,1]
/// and round `(2^k - 1) * x` half away from zero. Every execution path
/// derives its bits from this one expression.
pub fn split_codes(data: &[f32], k: usize) -> Vec<u32> {
    let levels = ((1u32 << k) - 1) as f32;
    data.iter()
        .map(|&v| (levels * v.clamp(0.0, 1.0)).round() as u32)
        .collect()
}

/// Split a real tensor into k independently propagating bit planes.
///
/// Per element: clamp to [0,1], quantize to `q = round((2^k - 1) * x)`
/// (half away from zero), then bit i of the code becomes plane i.
pub fn bit_split(x: &Tensor, k: usize) -> Result<SplitActivation> {
    check_bits("k", k)?;
    let codes: Vec<u32> = split_codes(&x.data, k);
    let planes = (1..=k)
        .map(|i| BitPlane::from_fn(codes.len(), |j| (codes[j] >> (k - i)) & 1 == 1))
        .collect();
    Ok(SplitActivation {
        planes,
        betas: betas(k),
        k,
        shape: x.shape.clone(),
    })
}

/// Straight-through backward of the splitting layer: upstream gradients from
/// every bit are accumulated, weighted by beta, and windowed to the clamp
/// range `0 <= x <= 1` (zero outside).
pub fn bit_split_backward(upstream: &[Tensor], x: &Tensor, betas: &[f32]) -> Result<Tensor> {
    if upstream.len() != betas.len() {
        return Err(invalid_arg!(
            "{} upstream grads but {} betas",
            upstream.len(),
            betas.len()
        ));
    }
    for g in upstream {
        if g.numel() != x.numel() {
            return Err(invalid_arg!("upstream grad shape mismatch"));
        }
    }
    let mut grad = vec![0.0f32; x.numel()];
    for (g, &b) in upstream.iter().zip(betas) {
        for (acc, &gv) in grad.iter_mut().zip(&g.data) {
            *acc += gv * b;
        }
    }
    for (gv, &xv) in grad.iter_mut().zip(&x.data) {
        if !(0.0..=1.0).contains(&xv) {
            *gv = 0.0;
        }
    }
    Tensor::from_vec(&x.shape, grad)
}

/// Binary activation for bit path i of k: bit = 1 iff `x >= 0.5`.
/// The produced bit carries logical value `beta(i, k)` when set.
pub fn binary_activation(x: &Tensor, i: usize, k: usize) -> Result<BitPlane> {
    check_bits("k", k)?;
    if i < 1 || i > k {
        return Err(invalid_arg!("bit index {i} out of range 1..={k}"));
    }
    Ok(BitPlane::from_fn(x.numel(), |j| x.data[j] >= 0.5))
}

/// Straight-through backward of the interior binary activation:
/// unconditional `g * beta_i` (no clamp window).
pub fn binary_activation_backward(g: &Tensor, i: usize, k: usize) -> Result<Tensor> {
    check_bits("k", k)?;
    if i < 1 || i > k {
        return Err(invalid_arg!("bit index {i} out of range 1..={k}"));
    }
    let b = beta(i, k);
    Ok(g.map(|v| v * b))
}

/// Weighted sum of the bit planes: `Y = sum_i beta_i * X_i`.
pub fn bit_merge(s: &SplitActivation) -> Result<Tensor> {
    let n: usize = s.shape.iter().product();
    if s.planes.len() != s.k || s.betas.len() != s.k {
        return Err(invalid_arg!("split activation has inconsistent arity"));
    }
    for p in &s.planes {
        if p.len() != n {
            return Err(invalid_arg!(
                "plane length {} does not match shape {:?}",
                p.len(),
                s.shape
            ));
        }
    }
    // Accumulate in f64: the f32 betas sum to 1 + 1ulp at k=3 otherwise.
    let mut out = vec![0.0f64; n];
    for (p, &b) in s.planes.iter().zip(&s.betas) {
        for (j, acc) in out.iter_mut().enumerate() {
            if p.get(j) {
                *acc += b as f64;
            }
        }
    }
    Tensor::from_vec(&s.shape, out.into_iter().map(|v| v as f32).collect())
}

/// Backward of the merging layer: the gradient to plane i is `g * beta_i`.
pub fn bit_merge_backward(g: &Tensor, betas: &[f32]) -> Vec<Tensor> {
    betas.iter().map(|&b| g.map(|v| v * b)).collect()
}

/// Gradient of the cost with respect to a trainable bit-weight factor:
/// `sum(g * x_i)` over all elements of the merged path.
pub fn beta_gradient(g: &Tensor, x_i: &Tensor) -> Result<f32> {
    if g.numel() != x_i.numel() {
        return Err(invalid_arg!("beta_gradient shape mismatch"));
    }
    let mut acc = 0.0f64;
    for (&gv, &xv) in g.data.iter().zip(&x_i.data) {
        acc += gv as f64 * xv as f64;
    }
    Ok(acc as f32)
}

/// Uniformly quantized weight tensor: n sign planes plus a real scale.
///
/// Dequantized values are the 2^n odd multiples
/// `{±1, ±3, ..., ±(2^n - 1)} * alpha / (2^n - 1)`; plane l carries
/// bit-weight `gamma_l = 2^(n-l) / (2^n - 1)`.
#[derive(Clone, Debug)]
pub struct QuantizedWeight {
    /// Sign planes, most significant first. Digital 1 encodes +1.
    pub planes: Vec<BitPlane>,
    pub alpha: f32,
    pub gammas: Vec<f32>,
    pub n: usize,
    pub shape: Vec<usize>,
}

impl QuantizedWeight {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Scale that maps an integer level to its real value: `alpha / (2^n - 1)`.
    pub fn plane_scale(&self) -> f32 {
        plane_scale(self.alpha, self.n)
    }

    /// Fused real multiplier applied after integer accumulation when the
    /// input plane carries logical value `beta` per set bit.
    pub fn fused_scale(&self, beta: f32) -> f32 {
        fused_scale(beta, self.alpha, self.n)
    }

    /// Integer level of element j, reconstructed from the sign planes:
    /// `sum_l 2^(n-l) * w_l` with `w_l = ±1`. Always odd.
    pub fn level(&self, j: usize) -> i32 {
        let mut q = 0i32;
        for (l, p) in self.planes.iter().enumerate() {
            let w = if p.get(j) { 1 } else { -1 };
            q += w << (self.n - 1 - l);
        }
        q
    }

    /// Integer levels as a dense tensor (each value an odd integer).
    pub fn level_tensor(&self) -> Tensor {
        let n = self.numel();
        let data = (0..n).map(|j| self.level(j) as f32).collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Dense real weights: `plane_scale * level`.
    pub fn dequantize(&self) -> Tensor {
        let s = self.plane_scale();
        let n = self.numel();
        let data = (0..n).map(|j| s * self.level(j) as f32).collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}

/// Nearest odd integer to `t`, clamped to `[-(2^n - 1), 2^n - 1]`.
/// Ties round half away from zero; `t == 0` picks +1 (sign(0) = +1).
pub fn nearest_odd_level(t: f32, n: usize) -> i32 {
    let max_level = (1i32 << n) - 1;
    let sign = if t < 0.0 { -1 } else { 1 };
    let m = ((t.abs() / 2.0).floor() as i32).min((max_level - 1) / 2);
    sign * (2 * m + 1)
}

/// Decompose an odd level into n ±1 plane signs (MSB first):
/// `q = sum_l 2^(n-l) * w_l`. Closed form: with `u = (q + 2^n - 1) / 2`,
/// plane l carries bit `n - l` of u.
#[inline]
fn level_sign(q: i32, n: usize, l: usize) -> bool {
    let u = ((q + ((1i32 << n) - 1)) / 2) as u32;
    (u >> (n - 1 - l)) & 1 == 1
}

/// Real scale mapping an integer level to its value: `alpha / (2^n - 1)`.
#[inline]
pub fn plane_scale(alpha: f32, n: usize) -> f32 {
    alpha / ((1u32 << n) - 1) as f32
}

/// Fused multiplier applied after integer accumulation when the input
/// plane carries logical value `beta` per set bit.
#[inline]
pub fn fused_scale(beta: f32, alpha: f32, n: usize) -> f32 {
    beta * plane_scale(alpha, n)
}

fn compute_levels(w: &Tensor, n: usize) -> (Vec<i32>, f32) {
    let numel = w.numel();
    let alpha = if n == 1 {
        if numel == 0 {
            0.0
        } else {
            w.data.iter().map(|v| v.abs() as f64).sum::<f64>() as f32 / numel as f32
        }
    } else {
        w.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    };
    let levels_f = ((1u32 << n) - 1) as f32;
    let qs: Vec<i32> = if alpha == 0.0 {
        vec![(1 << n) - 1; numel]
    } else {
        w.data
            .iter()
            .map(|&v| nearest_odd_level(v / alpha * levels_f, n))
            .collect()
    };
    (qs, alpha)
}

/// The integer-level view of `quantize_weights` without plane packing:
/// levels as an f32 tensor (each value an odd integer) plus the scale.
/// `plane_scale(alpha, n) * level` reproduces the dequantized weight.
pub fn quantize_levels(w: &Tensor, n: usize) -> Result<(Tensor, f32)> {
    check_bits("n", n)?;
    let (qs, alpha) = compute_levels(w, n);
    let levels = Tensor {
        shape: w.shape.clone(),
        data: qs.into_iter().map(|q| q as f32).collect(),
    };
    Ok((levels, alpha))
}

/// Quantize a real weight tensor to n bits.
///
/// n = 1 uses the binary closed form: sign planes with `alpha = mean(|W|)`.
/// n >= 2 is a symmetric uniform quantizer with `alpha = max(|W|)` and
/// nearest-odd-level rounding. An all-zero tensor degenerates to
/// all-(+1) planes with `alpha = 0` (dequantizes to zero).
pub fn quantize_weights(w: &Tensor, n: usize) -> Result<QuantizedWeight> {
    check_bits("n", n)?;
    let numel = w.numel();
    let gammas: Vec<f32> = (1..=n)
        .map(|l| (1u32 << (n - l)) as f32 / ((1u32 << n) - 1) as f32)
        .collect();
    let (qs, alpha) = compute_levels(w, n);
    let planes = (0..n)
        .map(|l| BitPlane::from_fn(numel, |j| level_sign(qs[j], n, l)))
        .collect();

    Ok(QuantizedWeight {
        planes,
        alpha,
        gammas,
        n,
        shape: w.shape.clone(),
    })
}

/// Comparison direction of a folded threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpDir {
    Ge,
    Le,
}

/// One folded per-channel threshold replacing BN + fixed-0.5 activation.
///
/// Constant channels (BN scale = 0) are encoded with `Ge` and an infinite
/// threshold: `-inf` is always-1, `+inf` is always-0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdEntry {
    pub threshold: f32,
    pub dir: CmpDir,
    /// Logical value the produced bit carries (the path's beta).
    pub output_beta: f32,
}

impl ThresholdEntry {
    #[inline]
    pub fn fires(&self, y: f32) -> bool {
        match self.dir {
            CmpDir::Ge => y >= self.threshold,
            CmpDir::Le => y <= self.threshold,
        }
    }

    pub fn with_output_beta(mut self, b: f32) -> Self {
        self.output_beta = b;
        self
    }
}

/// Fold `BN(x) >= act_threshold` into a single comparison against x.
///
/// Solves `gamma * (x - mean) / sqrt(var + eps) + shift >= act_threshold`:
/// `t = mean + (act_threshold - shift) * sqrt(var + eps) / gamma`, with the
/// direction flipping when gamma is negative.
pub fn fold_bn_threshold(
    gamma: f32,
    shift: f32,
    mean: f32,
    var: f32,
    eps: f32,
    act_threshold: f32,
) -> ThresholdEntry {
    if gamma == 0.0 {
        // BN output is the constant `shift`; the bit never depends on x.
        let threshold = if shift >= act_threshold {
            f32::NEG_INFINITY
        } else {
            f32::INFINITY
        };
        return ThresholdEntry {
            threshold,
            dir: CmpDir::Ge,
            output_beta: 1.0,
        };
    }
    let sd = (var as f64 + eps as f64).sqrt();
    let t = mean as f64 + (act_threshold as f64 - shift as f64) * sd / gamma as f64;
    ThresholdEntry {
        threshold: t as f32,
        dir: if gamma > 0.0 { CmpDir::Ge } else { CmpDir::Le },
        output_beta: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t1(data: &[f32]) -> Tensor {
        Tensor::from_vec(&[data.len()], data.to_vec()).unwrap()
    }

    // -- bit splitting ----------------------------------------------------

    #[test]
    fn split_k2_midpoint_example() {
        // x=0.7, k=2: q = round(2.1) = 2, bits (1,0), reconstruction 2/3.
        let s = bit_split(&t1(&[0.7]), 2).unwrap();
        assert!(s.planes[0].get(0));
        assert!(!s.planes[1].get(0));
        assert_eq!(s.betas, vec![2.0 / 3.0, 1.0 / 3.0]);
        let m = bit_merge(&s).unwrap();
        assert!((m.data[0] - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn split_clamps_below_and_above() {
        let s = bit_split(&t1(&[-0.2]), 2).unwrap();
        assert!(!s.planes[0].get(0) && !s.planes[1].get(0));
        let s = bit_split(&t1(&[1.3]), 2).unwrap();
        assert!(s.planes[0].get(0) && s.planes[1].get(0));
        assert_eq!(bit_merge(&s).unwrap().data[0], 1.0);
    }

    #[test]
    fn split_k3_exact_level() {
        // x = 5/7: q = 5 = 101b, betas (4/7, 2/7, 1/7), reconstruction 5/7.
        let s = bit_split(&t1(&[5.0 / 7.0]), 3).unwrap();
        let bits: Vec<bool> = s.planes.iter().map(|p| p.get(0)).collect();
        assert_eq!(bits, vec![true, false, true]);
        for (i, &b) in s.betas.iter().enumerate() {
            assert_eq!(b, (1 << (2 - i)) as f32 / 7.0);
        }
        let m = bit_merge(&s).unwrap();
        assert!((m.data[0] - 5.0 / 7.0).abs() < 1e-7);
        // cross-check against brute-force enumeration of all 8 levels
        let target = (7.0f32 * (5.0 / 7.0)).round() / 7.0;
        let nearest = (0..8).map(|q| q as f32 / 7.0).fold(f32::MAX, |best, lvl| {
            if (lvl - 5.0 / 7.0).abs() < (best - 5.0 / 7.0).abs() {
                lvl
            } else {
                best
            }
        });
        assert_eq!(target, nearest);
        assert!((m.data[0] - target).abs() < 1e-7);
    }

    #[test]
    fn split_rejects_bad_k() {
        assert!(bit_split(&t1(&[0.5]), 0).is_err());
        assert!(bit_split(&t1(&[0.5]), 5).is_err());
    }

    #[test]
    fn split_merge_roundtrip_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for k in 1..=4usize {
            let lv = ((1u32 << k) - 1) as f32;
            for _ in 0..2000 {
                let x: f32 = rng.gen_range(-0.5..1.5);
                let s = bit_split(&t1(&[x]), k).unwrap();
                let m = bit_merge(&s).unwrap().data[0];
                let expect = (lv * x.clamp(0.0, 1.0)).round() / lv;
                assert!(
                    (m - expect).abs() < 1e-7,
                    "k={k} x={x} merged={m} expect={expect}"
                );
            }
        }
    }

    #[test]
    fn betas_sum_to_one() {
        for k in 1..=4usize {
            let s: f64 = betas(k).iter().map(|&b| b as f64).sum();
            assert!((s - 1.0).abs() < 1e-7, "k={k} sum={s}");
        }
    }

    // -- STE backwards ----------------------------------------------------

    #[test]
    fn split_backward_accumulates_weighted_grads() {
        // g=(0.3, 0.6), beta=(2/3, 1/3), x=0.5 in range -> 0.4
        let g = [t1(&[0.3]), t1(&[0.6])];
        let out = bit_split_backward(&g, &t1(&[0.5]), &betas(2)).unwrap();
        assert!((out.data[0] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn split_backward_zero_outside_clamp() {
        let g = [t1(&[5.0]), t1(&[5.0])];
        let out = bit_split_backward(&g, &t1(&[-1.0]), &betas(2)).unwrap();
        assert_eq!(out.data[0], 0.0);
        let out = bit_split_backward(&g, &t1(&[1.0]), &betas(2)).unwrap();
        assert!(out.data[0] > 0.0); // boundary included
    }

    #[test]
    fn split_backward_zero_grads() {
        let g = [t1(&[0.0]), t1(&[0.0])];
        let out = bit_split_backward(&g, &t1(&[0.3]), &betas(2)).unwrap();
        assert_eq!(out.data[0], 0.0);
    }

    #[test]
    fn activation_threshold_is_inclusive_half() {
        let p = binary_activation(&t1(&[0.6, 0.5, 0.499]), 1, 2).unwrap();
        assert!(p.get(0));
        assert!(p.get(1));
        assert!(!p.get(2));
        // MSB path of k=2 carries value 2/3 when set
        assert_eq!(beta(1, 2), 2.0 / 3.0);
    }

    #[test]
    fn activation_rejects_out_of_range_bit_index() {
        let x = t1(&[0.7]);
        assert!(binary_activation(&x, 0, 2).is_err());
        assert!(binary_activation(&x, 3, 2).is_err());
        assert!(binary_activation_backward(&x, 5, 4).is_err());
    }

    #[test]
    fn activation_backward_scales_by_beta() {
        let g = binary_activation_backward(&t1(&[1.2]), 2, 2).unwrap();
        assert!((g.data[0] - 0.4).abs() < 1e-7);
        let g = binary_activation_backward(&t1(&[0.0]), 1, 2).unwrap();
        assert_eq!(g.data[0], 0.0);
        let g = binary_activation_backward(&t1(&[0.9]), 1, 1).unwrap();
        assert_eq!(g.data[0], 0.9); // k=1 has beta=1
    }

    #[test]
    fn merge_level_mapping() {
        // k=2 codes map to {0, 1/3, 2/3, 1}
        for (bits, expect) in [
            ([false, false], 0.0f32),
            ([false, true], 1.0 / 3.0),
            ([true, false], 2.0 / 3.0),
            ([true, true], 1.0),
        ] {
            let s = SplitActivation {
                planes: vec![
                    BitPlane::from_fn(1, |_| bits[0]),
                    BitPlane::from_fn(1, |_| bits[1]),
                ],
                betas: betas(2),
                k: 2,
                shape: vec![1],
            };
            let m = bit_merge(&s).unwrap();
            assert!((m.data[0] - expect).abs() < 1e-7, "bits {bits:?}");
        }
    }

    #[test]
    fn merge_backward_distributes_beta() {
        let grads = bit_merge_backward(&t1(&[3.0]), &betas(2));
        assert!((grads[0].data[0] - 2.0).abs() < 1e-6);
        assert!((grads[1].data[0] - 1.0).abs() < 1e-6);
        let grads = bit_merge_backward(&t1(&[0.0]), &betas(2));
        assert_eq!(grads[0].data[0], 0.0);
        let grads = bit_merge_backward(&t1(&[0.7]), &betas(1));
        assert_eq!(grads[0].data[0], 0.7); // k=1 pass-through
    }

    #[test]
    fn beta_gradient_is_inner_product() {
        assert_eq!(beta_gradient(&t1(&[1.0, 1.0]), &t1(&[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(beta_gradient(&t1(&[1.0, 1.0]), &t1(&[0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(beta_gradient(&t1(&[0.0, 0.0]), &t1(&[3.0, 4.0])).unwrap(), 0.0);
    }

    // -- weight quantization ----------------------------------------------

    #[test]
    fn binary_weights_use_mean_abs_scale() {
        let q = quantize_weights(&t1(&[0.3, -0.5, 0.2, -0.4]), 1).unwrap();
        assert!((q.alpha - 0.35).abs() < 1e-7);
        let signs: Vec<bool> = (0..4).map(|j| q.planes[0].get(j)).collect();
        assert_eq!(signs, vec![true, false, true, false]);
        assert_eq!(q.gammas, vec![1.0]);
    }

    #[test]
    fn binary_weights_zero_degenerate() {
        let q = quantize_weights(&t1(&[0.0, 0.0]), 1).unwrap();
        assert_eq!(q.alpha, 0.0);
        assert!(q.planes[0].get(0) && q.planes[0].get(1)); // sign(0) = +1
        assert_eq!(q.dequantize().data, vec![0.0, 0.0]);
    }

    #[test]
    fn two_bit_full_scale_value() {
        let q = quantize_weights(&t1(&[1.0]), 2).unwrap();
        assert_eq!(q.alpha, 1.0);
        assert_eq!(q.level(0), 3);
        assert!(q.planes[0].get(0) && q.planes[1].get(0));
        assert_eq!(q.dequantize().data[0], 1.0);
    }

    #[test]
    fn two_bit_small_negative_picks_nearest_odd() {
        // with alpha=1 the 2-bit levels are {-1, -1/3, 1/3, 1}; -0.2 -> -1/3
        assert_eq!(nearest_odd_level(-0.2 * 3.0, 2), -1);
        assert!(!level_sign(-1, 2, 0) && level_sign(-1, 2, 1)); // planes (-1, +1)
    }

    #[test]
    fn nearest_odd_level_ties_away_from_zero() {
        assert_eq!(nearest_odd_level(2.0, 2), 3);
        assert_eq!(nearest_odd_level(-2.0, 2), -3);
        assert_eq!(nearest_odd_level(0.0, 2), 1);
        assert_eq!(nearest_odd_level(6.0, 3), 7);
        assert_eq!(nearest_odd_level(100.0, 2), 3); // clamped
    }

    #[test]
    fn level_sign_closed_form_matches_greedy() {
        for n in 1..=4usize {
            let max = (1i32 << n) - 1;
            let mut q = -max;
            while q <= max {
                // greedy reference decomposition
                let mut r = q;
                for l in 0..n {
                    let w = r > 0;
                    r -= if w { 1 } else { -1 } << (n - 1 - l);
                    assert_eq!(level_sign(q, n, l), w, "q={q} n={n} l={l}");
                }
                assert_eq!(r, 0);
                q += 2;
            }
        }
    }

    #[test]
    fn quantize_levels_agrees_with_quantize_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for n in 1..=4usize {
            let data: Vec<f32> = (0..64).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let t = t1(&data);
            let qw = quantize_weights(&t, n).unwrap();
            let (levels, alpha) = quantize_levels(&t, n).unwrap();
            assert_eq!(alpha, qw.alpha);
            for j in 0..64 {
                assert_eq!(levels.data[j], qw.level(j) as f32);
            }
        }
    }

    #[test]
    fn dequantized_levels_are_uniform_odd_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=4usize {
            let data: Vec<f32> = (0..256).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let q = quantize_weights(&t1(&data), n).unwrap();
            let lv = ((1i32 << n) - 1) as f32;
            let mut seen = std::collections::BTreeSet::new();
            for j in 0..data.len() {
                let l = q.level(j);
                assert_eq!(l.rem_euclid(2), 1, "level {l} must be odd");
                assert!(l.abs() <= lv as i32);
                seen.insert(l);
            }
            assert!(seen.len() <= 1 << n);
            // brute-force oracle: quantizer picks the closest of the 2^n levels
            for (j, &w) in data.iter().enumerate() {
                let got = q.plane_scale() * q.level(j) as f32;
                let best = (0..(1i32 << n))
                    .map(|m| (2 * m + 1 - (1i32 << n)) as f32 * q.alpha / lv)
                    .fold(f32::MAX, |b, lvl| {
                        if (lvl - w).abs() < (b - w).abs() {
                            lvl
                        } else {
                            b
                        }
                    });
                assert!(
                    (got - best).abs() <= 1e-6 * q.alpha.max(1.0),
                    "n={n} w={w} got={got} best={best}"
                );
            }
        }
    }

    #[test]
    fn quantization_preserves_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 1..=4usize {
            let data: Vec<f32> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q = quantize_weights(&t1(&data), n).unwrap();
            let deq = q.dequantize();
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.sort_by(|&a, &b| data[a].partial_cmp(&data[b]).unwrap());
            for w in idx.windows(2) {
                assert!(
                    deq.data[w[0]] <= deq.data[w[1]],
                    "monotonicity violated at n={n}"
                );
            }
        }
    }

    // -- threshold folding --------------------------------------------------

    #[test]
    fn fold_identity_bn() {
        let e = fold_bn_threshold(1.0, 0.0, 0.0, 1.0, 0.0, 0.5);
        assert_eq!(e.threshold, 0.5);
        assert_eq!(e.dir, CmpDir::Ge);
    }

    #[test]
    fn fold_scaled_shifted_bn() {
        let e = fold_bn_threshold(2.0, 0.0, 1.0, 1.0, 0.0, 0.5);
        assert!((e.threshold - 1.25).abs() < 1e-7);
        assert_eq!(e.dir, CmpDir::Ge);
        // scan oracle against the unfused computation
        let mut x = 0.0f32;
        while x <= 2.0 {
            let bn = 2.0 * (x - 1.0) / 1.0f32.sqrt();
            assert_eq!(bn >= 0.5, e.fires(x), "x={x}");
            x += 1e-3;
        }
    }

    #[test]
    fn fold_negative_scale_flips_direction() {
        let e = fold_bn_threshold(-1.0, 0.0, 0.0, 1.0, 0.0, 0.5);
        assert!((e.threshold - -0.5).abs() < 1e-7);
        assert_eq!(e.dir, CmpDir::Le);
        let mut x = -2.0f32;
        while x <= 2.0 {
            let bn = -x;
            assert_eq!(bn >= 0.5, e.fires(x), "x={x}");
            x += 1e-3;
        }
    }

    #[test]
    fn fold_zero_scale_is_constant() {
        let hi = fold_bn_threshold(0.0, 0.9, 3.0, 2.0, 1e-5, 0.5);
        assert!(hi.fires(-1e30) && hi.fires(1e30));
        let lo = fold_bn_threshold(0.0, 0.1, 3.0, 2.0, 1e-5, 0.5);
        assert!(!lo.fires(-1e30) && !lo.fires(1e30));
    }

    #[test]
    fn fold_equivalence_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..20_000 {
            let gamma: f32 = if rng.gen_bool(0.05) {
                0.0
            } else {
                rng.gen_range(-3.0..3.0)
            };
            let shift: f32 = rng.gen_range(-2.0..2.0);
            let mean: f32 = rng.gen_range(-2.0..2.0);
            let var: f32 = rng.gen_range(0.0..4.0);
            let eps = 1e-5f32;
            let x: f32 = rng.gen_range(-5.0..5.0);
            let e = fold_bn_threshold(gamma, shift, mean, var, eps, 0.5);
            let bn = gamma * (x - mean) / (var + eps).sqrt() + shift;
            assert_eq!(
                bn >= 0.5,
                e.fires(x),
                "gamma={gamma} shift={shift} mean={mean} var={var} x={x}"
            );
        }
    }
}
