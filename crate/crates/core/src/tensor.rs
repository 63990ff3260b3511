//! Dense f32 tensors and the reference linear algebra.
//!
//! Row-major layout everywhere; transposes are explicit copies. This is the
//! non-packed substrate: master weights, gradients, and the FP32 baseline
//! the packed kernels are benchmarked against.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid_arg, Result};

/// Dense real-valued N-d array in row-major order.
///
/// Invariant: `shape.iter().product() == data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid_arg!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// True when every element is finite (no NaN/Inf).
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// He-normal initialization: zero mean, variance `2 / fan_in`.
///
/// Identical `(shape, fan_in, seed)` produce a bitwise-identical tensor.
pub fn he_init(shape: &[usize], fan_in: usize, seed: u64) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(invalid_arg!("he_init requires fan_in >= 1"));
    }
    if shape.is_empty() {
        return Err(invalid_arg!("he_init requires a non-empty shape"));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0f64, std).expect("std is finite and positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

/// Dense FP32 matrix-vector product: `y_i = sum_j W[i,j] * x[j]`.
///
/// This is the benchmark baseline kernel; keep the inner loop a plain dot
/// product so it autovectorizes.
pub fn matvec_f32(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w.shape.len() != 2 {
        return Err(invalid_arg!("matvec expects a 2-d matrix, got {:?}", w.shape));
    }
    let (m, n) = (w.shape[0], w.shape[1]);
    if x.numel() != n {
        return Err(invalid_arg!(
            "matvec inner dims mismatch: W is {}x{}, x has {}",
            m,
            n,
            x.numel()
        ));
    }
    let mut out = vec![0.0f32; m];
    for (i, yi) in out.iter_mut().enumerate() {
        let row = &w.data[i * n..(i + 1) * n];
        let mut acc = 0.0f32;
        for (a, b) in row.iter().zip(x.data.iter()) {
            acc += a * b;
        }
        *yi = acc;
    }
    Tensor::from_vec(&[m], out)
}

// Register-tile sizes for the blocked kernel: 4 rows x 16 cols of
// accumulators stay resident in vector registers through the k loop.
const GEMM_MR: usize = 4;
const GEMM_NR: usize = 16;

/// 4x16 register-tiled inner kernel, fused multiply-add per term.
///
/// Each output element starts from its prior value and folds its k terms
/// in ascending p order through the same `mul_add` chain as the scalar
/// tail region, so which region computes an element never changes its
/// rounding.
///
/// Safety: callers guarantee `i0 + GEMM_MR <= m`, `j0 + GEMM_NR <= n`,
/// `a.len() == m*k`, `b.len() == k*n`, `out.len() == m*n`.
#[inline]
fn gemm_tile(a: &[f32], b: &[f32], out: &mut [f32], i0: usize, j0: usize, k: usize, n: usize) {
    let mut acc = [[0.0f32; GEMM_NR]; GEMM_MR];
    unsafe {
        for (r, row) in acc.iter_mut().enumerate() {
            let src = out.as_ptr().add((i0 + r) * n + j0);
            for (c, v) in row.iter_mut().enumerate() {
                *v = *src.add(c);
            }
        }
        for p in 0..k {
            let b_tile = b.as_ptr().add(p * n + j0);
            for (r, row) in acc.iter_mut().enumerate() {
                let a_rp = *a.get_unchecked((i0 + r) * k + p);
                for (c, v) in row.iter_mut().enumerate() {
                    *v = a_rp.mul_add(*b_tile.add(c), *v);
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            let dst = out.as_mut_ptr().add((i0 + r) * n + j0);
            for (c, &v) in row.iter().enumerate() {
                *dst.add(c) = v;
            }
        }
    }
}

fn gemm_scalar_region(
    a: &[f32],
    b: &[f32],
    out: &mut [f32],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    for i in rows {
        for p in 0..k {
            let a_ip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for j in cols.clone() {
                out[i * n + j] = a_ip.mul_add(b_row[j], out[i * n + j]);
            }
        }
    }
}

/// `out += A * B` with `A: m x k`, `B: k x n`, all row-major slices.
pub fn gemm_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let m_main = m - m % GEMM_MR;
    let n_main = n - n % GEMM_NR;
    for i0 in (0..m_main).step_by(GEMM_MR) {
        for j0 in (0..n_main).step_by(GEMM_NR) {
            gemm_tile(a, b, out, i0, j0, k, n);
        }
    }
    if n_main < n {
        gemm_scalar_region(a, b, out, 0..m_main, n_main..n, k, n);
    }
    if m_main < m {
        gemm_scalar_region(a, b, out, m_main..m, 0..n, k, n);
    }
}

/// `out = A * B`, overwriting `out`.
pub fn gemm(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    out.fill(0.0);
    gemm_acc(a, b, out, m, k, n);
}

/// `out = A * B^T` with `A: m x k`, `B: n x k` (both row-major).
///
/// Runs as an explicit transpose of B followed by [`gemm`]: the ikj kernel
/// vectorizes where a per-element dot-product reduction does not, and each
/// output element still accumulates its k terms in the same ascending
/// order, so results are bit-identical to the naive dot loop.
pub fn gemm_bt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let mut bt = vec![0.0f32; k * n];
    transpose(b, &mut bt, n, k);
    gemm(a, &bt, out, m, k, n);
}

/// Explicit transpose copy: `out[j,i] = a[i,j]` for `a: m x n`.
pub fn transpose(a: &[f32], out: &mut [f32], m: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}
