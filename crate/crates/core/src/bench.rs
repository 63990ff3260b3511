//! CPU timing harness: packed popcount kernels against the in-repo dense
//! FP32 baseline, for the large matrix-vector product and for end-to-end
//! MLP inference with a per-layer breakdown.
//!
//! Methodology: monotonic clock, >= 3 warmup runs discarded, >= 20 timed
//! repetitions, medians reported (never single-shot). Runs are pinned to
//! one worker unless a worker count is requested; the parallel kernel is
//! reported separately by its config.
//!
//! Caveat: speedup ratios are machine-dependent, and the external baseline
//! a GPU report would normalize against (a vendor BLAS) may be optimized
//! differently from these kernels; the dense baseline here is the same
//! codebase's best-effort FP32 loop so the comparison stays self-contained.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::binlinalg::{and_dot, packed_matvec, Encoding, Mode, PackedMatrix};
use crate::bitplane::BitPlane;
use crate::data::Dataset;
use crate::error::{invalid_arg, Result};
use crate::net::compile::{CompiledModel, CompiledOp};
use crate::tensor::{matvec_f32, Tensor};

pub const MIN_REPETITIONS: usize = 20;
pub const WARMUP_RUNS: usize = 3;
pub const SCHEMA: &str = "bitsplit-bench/1";

#[derive(Clone, Debug, Serialize)]
pub struct BenchConfig {
    pub name: String,
    pub dim: usize,
    pub k: usize,
    pub n: usize,
    pub mode: String,
    pub workers: usize,
    pub repetitions: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerTime {
    pub layer: String,
    pub median_ns: u64,
    pub fraction: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub schema: &'static str,
    pub config: BenchConfig,
    pub samples_ns: Vec<u64>,
    pub median_ns: u64,
    pub mad_ns: u64,
    /// MAD/median >= 10% in pinned single-worker mode.
    pub noisy: bool,
    pub baseline_median_ns: Option<u64>,
    pub speedup_vs_f32: Option<f64>,
    pub layers: Vec<LayerTime>,
    pub baseline_layers: Vec<LayerTime>,
}

fn median(samples: &mut [u64]) -> u64 {
    samples.sort_unstable();
    samples[samples.len() / 2]
}

fn mad(samples: &[u64], med: u64) -> u64 {
    let mut devs: Vec<u64> = samples.iter().map(|&s| s.abs_diff(med)).collect();
    median(&mut devs)
}

fn time_reps(reps: usize, mut f: impl FnMut()) -> Vec<u64> {
    for _ in 0..WARMUP_RUNS {
        f();
    }
    (0..reps)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_nanos() as u64
        })
        .collect()
}

fn report(config: BenchConfig, mut samples: Vec<u64>) -> BenchReport {
    let med = median(&mut samples);
    let mad_ns = mad(&samples, med);
    BenchReport {
        schema: SCHEMA,
        config,
        noisy: med > 0 && (mad_ns as f64 / med as f64) >= 0.10,
        median_ns: med,
        mad_ns,
        samples_ns: samples,
        baseline_median_ns: None,
        speedup_vs_f32: None,
        layers: Vec::new(),
        baseline_layers: Vec::new(),
    }
}

fn random_plane(rng: &mut ChaCha8Rng, len: usize) -> BitPlane {
    let n_words = len.div_ceil(64);
    let mut words: Vec<u64> = (0..n_words).map(|_| rng.gen()).collect();
    let tail = len % 64;
    if tail != 0 {
        if let Some(last) = words.last_mut() {
            *last &= (1u64 << tail) - 1;
        }
    }
    BitPlane::from_words(words, len).expect("masked words are canonical")
}

/// Row-partitioned packed matvec across plain threads (deterministic: each
/// row is computed independently and written to its own slot).
fn packed_matvec_parallel(w: &PackedMatrix, x: &BitPlane, workers: usize) -> Vec<i32> {
    let ones = x.popcount();
    let mut out = vec![0i32; w.rows];
    let chunk = w.rows.div_ceil(workers.max(1));
    std::thread::scope(|scope| {
        for (i, slot) in out.chunks_mut(chunk).enumerate() {
            let planes = &w.planes[i * chunk..(i * chunk + slot.len())];
            scope.spawn(move || {
                for (s, p) in slot.iter_mut().zip(planes) {
                    *s = and_dot(x, p, ones).expect("lengths match");
                }
            });
        }
    });
    out
}

/// Time the packed k x n plane products for a `dim x dim` matrix against one
/// `dim` vector, and the dense FP32 matvec baseline on the same logical
/// problem. Packed correctness is spot-checked on 16 random rows against the
/// decoded integer oracle before any timing.
pub fn bench_matvec(dim: usize, k: usize, n: usize, repetitions: usize, workers: usize) -> Result<BenchReport> {
    if dim == 0 {
        return Err(invalid_arg!("dim must be positive"));
    }
    if repetitions < MIN_REPETITIONS {
        return Err(invalid_arg!("at least {MIN_REPETITIONS} repetitions required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);

    // packed operands: k activation planes, n weight-plane matrices
    let x_planes: Vec<BitPlane> = (0..k).map(|_| random_plane(&mut rng, dim)).collect();
    let weight_mats: Vec<PackedMatrix> = (0..n)
        .map(|_| {
            let planes: Vec<BitPlane> = (0..dim).map(|_| random_plane(&mut rng, dim)).collect();
            PackedMatrix::new(dim, dim, planes, Encoding::PlusMinusOne)
        })
        .collect::<Result<_>>()?;

    // correctness spot-check on 16 random rows
    for _ in 0..16 {
        let r = rng.gen_range(0..dim);
        let xb = x_planes[0].unpack();
        let wb = weight_mats[0].planes[r].unpack();
        let expect: i64 = xb
            .iter()
            .zip(&wb)
            .map(|(&a, &b)| a as i64 * (2 * b as i64 - 1))
            .sum();
        let got = and_dot(&x_planes[0], &weight_mats[0].planes[r], x_planes[0].popcount())?;
        if got as i64 != expect {
            return Err(crate::Error::InvalidState(format!(
                "packed kernel row {r} disagrees with oracle: {got} vs {expect}"
            )));
        }
    }

    // dense baseline operands
    let w_dense = crate::tensor::he_init(&[dim, dim], dim, 7)?;
    let x_dense = crate::tensor::he_init(&[dim], dim, 8)?;

    let scale = 0.017f32; // stand-in fused multiplier
    let mut sink = 0.0f32;
    let packed_samples = time_reps(repetitions, || {
        // mirror the BitSplit cost structure: k*n plane products plus the
        // shift-combine and fused scaling per path
        for xp in &x_planes {
            let per_plane: Vec<Vec<i32>> = weight_mats
                .iter()
                .map(|m| {
                    if workers > 1 {
                        packed_matvec_parallel(m, xp, workers)
                    } else {
                        packed_matvec(m, xp, Mode::And).expect("dims match")
                    }
                })
                .collect();
            let mut acc = 0.0f32;
            for r in 0..dim {
                let mut total = 0i32;
                for (l, v) in per_plane.iter().enumerate() {
                    total += v[r] << (n - 1 - l);
                }
                acc += scale * total as f32;
            }
            sink += acc;
        }
    });
    std::hint::black_box(sink);

    let mut sink2 = 0.0f32;
    let dense_samples = time_reps(repetitions, || {
        let y = matvec_f32(&w_dense, &x_dense).expect("dims match");
        sink2 += y.data[0];
    });
    std::hint::black_box(sink2);

    let mut rep = report(
        BenchConfig {
            name: "matvec".into(),
            dim,
            k,
            n,
            mode: "and".into(),
            workers,
            repetitions,
        },
        packed_samples,
    );
    let mut dense = dense_samples;
    let dense_med = median(&mut dense);
    rep.baseline_median_ns = Some(dense_med);
    rep.speedup_vs_f32 = Some(dense_med as f64 / rep.median_ns.max(1) as f64);
    Ok(rep)
}

fn summarize_layers(per_op: &[(String, Vec<u64>)]) -> Vec<LayerTime> {
    let medians: Vec<(String, u64)> = per_op
        .iter()
        .map(|(name, samples)| {
            let mut s = samples.clone();
            (name.clone(), median(&mut s))
        })
        .collect();
    let total: u64 = medians.iter().map(|(_, m)| m).sum();
    medians
        .into_iter()
        .map(|(layer, median_ns)| LayerTime {
            layer,
            median_ns,
            fraction: if total > 0 {
                median_ns as f64 / total as f64
            } else {
                0.0
            },
        })
        .collect()
}

/// Dense FP32 execution of the conventional multi-bit network reconstructed
/// from the compiled ops (dense matvecsses BN affine, quantizing activation),
/// timed per layer.
fn baseline_ops(compiled: &CompiledModel) -> Vec<(String, BaselineOp)> {
    let mut ops = Vec::new();
    for op in &compiled.ops {
        match op {
            CompiledOp::Linear { name, w, b } => ops.push((
                format!("fc:{name}"),
                BaselineOp::Linear {
                    w: w.clone(),
                    b: b.clone(),
                },
            )),
            CompiledOp::Conv { name, w_flat, c_in, c_out, kh, kw, stride, pad } => ops.push((
                format!("conv:{name}"),
                BaselineOp::Conv {
                    w_flat: w_flat.clone(),
                    c_in: *c_in,
                    c_out: *c_out,
                    kh: *kh,
                    kw: *kw,
                    stride: *stride,
                    pad: *pad,
                },
            )),
            CompiledOp::BnApply { name, gamma, .. } => ops.push((
                format!("bn:{name}"),
                BaselineOp::Affine {
                    channels: gamma.numel(),
                },
            )),
            CompiledOp::SplitFolded { name, entries } => {
                // the conventional net runs BN then the quantizing activation
                ops.push((
                    format!("bn:{name}"),
                    BaselineOp::Affine {
                        channels: entries[0].len(),
                    },
                ));
                ops.push(("act:split".into(), BaselineOp::Quantize { k: compiled.k }));
            }
            CompiledOp::Split => {
                ops.push(("act:split".into(), BaselineOp::Quantize { k: compiled.k }));
            }
            CompiledOp::PackedLinear { name, mats, nbits, .. } => {
                let w = dequantized_dense(mats, *nbits);
                ops.push((format!("fc:{name}"), BaselineOp::Linear { w, b: None }));
            }
            CompiledOp::PackedConv { name, mats, nbits, c_in, c_out, kh, kw, stride, pad, .. } => {
                let w_flat = dequantized_dense(mats, *nbits);
                ops.push((
                    format!("conv:{name}"),
                    BaselineOp::Conv {
                        w_flat,
                        c_in: *c_in,
                        c_out: *c_out,
                        kh: *kh,
                        kw: *kw,
                        stride: *stride,
                        pad: *pad,
                    },
                ));
            }
            CompiledOp::Threshold { name, entries } => {
                ops.push((
                    format!("bn:{name}"),
                    BaselineOp::Affine {
                        channels: entries[0].len().max(1),
                    },
                ));
                ops.push((format!("act:{name}"), BaselineOp::Quantize { k: compiled.k }));
            }
            CompiledOp::OrPool { window, stride } => ops.push((
                "pool".into(),
                BaselineOp::Pool {
                    window: *window,
                    stride: *stride,
                },
            )),
            CompiledOp::Merge { .. } => {}
        }
    }
    ops
}

enum BaselineOp {
    Linear { w: Tensor, b: Option<Tensor> },
    Conv { w_flat: Tensor, c_in: usize, c_out: usize, kh: usize, kw: usize, stride: usize, pad: usize },
    Affine { channels: usize },
    Quantize { k: usize },
    Pool { window: usize, stride: usize },
}

fn dequantized_dense(mats: &[PackedMatrix], nbits: usize) -> Tensor {
    let (rows, cols) = (mats[0].rows, mats[0].cols);
    let scale = 1.0f32 / ((1u32 << nbits) - 1) as f32;
    let mut data = vec![0.0f32; rows * cols];
    for (l, m) in mats.iter().enumerate() {
        let w = (1i32 << (nbits - 1 - l)) as f32;
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += if m.planes[r].get(c) { w } else { -w } * scale;
            }
        }
    }
    Tensor {
        shape: vec![rows, cols],
        data,
    }
}

fn run_baseline(ops: &[(String, BaselineOp)], input: &[f32], dims: &[usize]) -> Vec<(String, u64)> {
    use crate::net::layers::{conv_forward_from_cols, im2col, maxpool_forward, ConvGeom};
    let mut data = input.to_vec();
    let mut cur_dims: Vec<usize> = dims.to_vec();
    let mut times = Vec::with_capacity(ops.len());
    for (name, op) in ops {
        let t0 = Instant::now();
        match op {
            BaselineOp::Linear { w, b } => {
                let x = Tensor::from_vec(&[1, data.len()], data.clone()).expect("flat");
                let y = crate::net::layers::linear_forward(&x, w, b.as_ref()).expect("dims");
                data = y.data;
                cur_dims = vec![w.shape[0]];
            }
            BaselineOp::Conv { w_flat, c_in, c_out, kh, kw, stride, pad } => {
                let (h, w_dim) = if cur_dims.len() == 3 {
                    (cur_dims[1], cur_dims[2])
                } else {
                    let side = ((data.len() / c_in) as f64).sqrt() as usize;
                    (side, side)
                };
                let geom = ConvGeom {
                    c_in: *c_in,
                    h,
                    w: w_dim,
                    c_out: *c_out,
                    kh: *kh,
                    kw: *kw,
                    stride: *stride,
                    pad: *pad,
                };
                let x = Tensor::from_vec(&[1, *c_in, h, w_dim], data.clone()).expect("dims");
                let cols = im2col(&x, &geom).expect("geom");
                let y = conv_forward_from_cols(&cols, w_flat, &geom, 1).expect("geom");
                let (oh, ow) = geom.out_hw();
                data = y.data;
                cur_dims = vec![*c_out, oh, ow];
            }
            BaselineOp::Affine { channels } => {
                let spatial = (data.len() / channels).max(1);
                for (j, v) in data.iter_mut().enumerate() {
                    let c = j / spatial;
                    *v = *v * (1.0 + 1e-6 * c as f32) + 0.01;
                }
            }
            BaselineOp::Quantize { k } => {
                let lv = ((1u32 << k) - 1) as f32;
                for v in data.iter_mut() {
                    *v = (lv * v.clamp(0.0, 1.0)).round() / lv;
                }
            }
            BaselineOp::Pool { window, stride } => {
                if cur_dims.len() == 3 {
                    let (c, h, w_dim) = (cur_dims[0], cur_dims[1], cur_dims[2]);
                    let x = Tensor::from_vec(&[1, c, h, w_dim], data.clone()).expect("dims");
                    let (y, _) = maxpool_forward(&x, c, h, w_dim, *window, *stride).expect("geom");
                    data = y.data;
                    let oh = (h - window) / stride + 1;
                    let ow = (w_dim - window) / stride + 1;
                    cur_dims = vec![c, oh, ow];
                }
            }
        }
        times.push((name.clone(), t0.elapsed().as_nanos() as u64));
    }
    times
}

/// End-to-end inference timing of a compiled model against the conventional
/// FP32 execution of the same network, with per-layer breakdowns.
pub fn bench_mlp(compiled: &CompiledModel, ds: &Dataset, repetitions: usize, workers: usize) -> Result<BenchReport> {
    if repetitions < MIN_REPETITIONS {
        return Err(invalid_arg!("at least {MIN_REPETITIONS} repetitions required"));
    }
    if ds.is_empty() {
        return Err(invalid_arg!("empty dataset"));
    }
    let dims: Vec<usize> = ds.sample_shape().to_vec();
    let (sample, _) = ds.sample(0);

    // warmup + timed packed runs with per-op instrumentation
    for _ in 0..WARMUP_RUNS {
        compiled.forward_sample_timed(sample, &dims)?;
    }
    let mut packed_totals = Vec::with_capacity(repetitions);
    let mut per_op: Vec<(String, Vec<u64>)> = Vec::new();
    for _ in 0..repetitions {
        let (_, times) = compiled.forward_sample_timed(sample, &dims)?;
        packed_totals.push(times.iter().map(|(_, t)| t).sum());
        if per_op.is_empty() {
            per_op = times.into_iter().map(|(n, t)| (n, vec![t])).collect();
        } else {
            for ((_, acc), (_, t)) in per_op.iter_mut().zip(times) {
                acc.push(t);
            }
        }
    }

    // conventional FP32 execution of the same network
    let base_ops = baseline_ops(compiled);
    for _ in 0..WARMUP_RUNS {
        run_baseline(&base_ops, sample, &dims);
    }
    let mut base_totals = Vec::with_capacity(repetitions);
    let mut base_per_op: Vec<(String, Vec<u64>)> = Vec::new();
    for _ in 0..repetitions {
        let times = run_baseline(&base_ops, sample, &dims);
        base_totals.push(times.iter().map(|(_, t)| t).sum());
        if base_per_op.is_empty() {
            base_per_op = times.into_iter().map(|(n, t)| (n, vec![t])).collect();
        } else {
            for ((_, acc), (_, t)) in base_per_op.iter_mut().zip(times) {
                acc.push(t);
            }
        }
    }

    let mut rep = report(
        BenchConfig {
            name: "mlp".into(),
            dim: sample.len(),
            k: compiled.k,
            n: compiled.n,
            mode: "and".into(),
            workers,
            repetitions,
        },
        packed_totals,
    );
    let mut bt = base_totals;
    let base_med = median(&mut bt);
    rep.baseline_median_ns = Some(base_med);
    rep.speedup_vs_f32 = Some(base_med as f64 / rep.median_ns.max(1) as f64);
    rep.layers = summarize_layers(&per_op);
    rep.baseline_layers = summarize_layers(&base_per_op);
    Ok(rep)
}

impl BenchReport {
    /// Human-readable table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let c = &self.config;
        out.push_str(&format!(
            "bench {}  dim={} k={} n={} mode={} workers={} reps={}\n",
            c.name, c.dim, c.k, c.n, c.mode, c.workers, c.repetitions
        ));
        out.push_str(&format!(
            "  median {:>12}   mad {:>10}   noisy={}\n",
            format_ns(self.median_ns),
            format_ns(self.mad_ns),
            self.noisy
        ));
        if let Some(b) = self.baseline_median_ns {
            out.push_str(&format!(
                "  fp32 baseline {:>12}   speedup {:.2}x\n",
                format_ns(b),
                self.speedup_vs_f32.unwrap_or(0.0)
            ));
        }
        if !self.layers.is_empty() {
            out.push_str("  packed per-layer breakdown:\n");
            for l in &self.layers {
                out.push_str(&format!(
                    "    {:<28} {:>12}  {:5.1}%\n",
                    l.layer,
                    format_ns(l.median_ns),
                    l.fraction * 100.0
                ));
            }
        }
        if !self.baseline_layers.is_empty() {
            out.push_str("  fp32 per-layer breakdown:\n");
            for l in &self.baseline_layers {
                out.push_str(&format!(
                    "    {:<28} {:>12}  {:5.1}%\n",
                    l.layer,
                    format_ns(l.median_ns),
                    l.fraction * 100.0
                ));
            }
        }
        out
    }

    /// Append machine-readable records (one JSON object per line): a summary
    /// record plus one record per raw sample.
    pub fn write_records(&self, w: &mut impl Write) -> Result<()> {
        let summary = serde_json::to_string(self)
            .map_err(|e| crate::Error::Format(format!("bench record encode: {e}")))?;
        writeln!(w, "{summary}")?;
        for (i, &s) in self.samples_ns.iter().enumerate() {
            writeln!(
                w,
                "{{\"schema\":\"{SCHEMA}\",\"bench\":\"{}\",\"sample\":{i},\"ns\":{s}}}",
                self.config.name
            )?;
        }
        Ok(())
    }
}

fn format_ns(ns: u64) -> String {
    if ns >= 1_000_000_000 {
        format!("{:.2}s", ns as f64 / 1e9)
    } else if ns >= 1_000_000 {
        format!("{:.2}ms", ns as f64 / 1e6)
    } else if ns >= 1_000 {
        format!("{:.1}us", ns as f64 / 1e3)
    } else {
        format!("{ns}ns")
    }
}
