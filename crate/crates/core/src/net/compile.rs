//! Compilation to the packed inference form: weights packed into bit
//! planes, every BN + binary-activation pair folded into per-channel
//! thresholds, activations carried as bit planes between layers.
//!
//! The packed executor and the dense reference interpreter compute every
//! decision quantity with the same f32 expressions, so their logits agree
//! bit for bit.

use crate::binlinalg::{self, PackedMatrix};
use crate::bitplane::BitPlane;
use crate::error::{invalid_arg, Error, Result};
use crate::quant::{self, ThresholdEntry};
use crate::tensor::Tensor;

use super::layers::{self, ConvGeom};
use super::{LayerKind, Model};

/// Logits plus per-op wall times in execution order.
pub type TimedForward = (Vec<f32>, Vec<(String, u64)>);

#[derive(Clone, Debug)]
pub enum CompiledOp {
    /// Full-precision dense layer (prologue/epilogue).
    Linear {
        name: String,
        w: Tensor,
        b: Option<Tensor>,
    },
    /// Full-precision convolution (prologue).
    Conv {
        name: String,
        w_flat: Tensor,
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    /// Explicit BN with running statistics (only ever before the split).
    BnApply {
        name: String,
        gamma: Tensor,
        shift: Tensor,
        mean: Tensor,
        var: Tensor,
    },
    /// Dense values -> k bit planes.
    Split,
    /// BN + splitting layer folded into per-channel multi-level thresholds:
    /// the code of a value is the count of fired comparisons across the
    /// 2^k - 1 level boundaries.
    SplitFolded {
        name: String,
        /// `entries[m][c]`: threshold for level boundary m+1, channel c.
        entries: Vec<Vec<ThresholdEntry>>,
    },
    /// Packed fully connected layer: one row-packed matrix per weight
    /// plane, with per-path fused scales.
    PackedLinear {
        name: String,
        mats: Vec<PackedMatrix>,
        nbits: usize,
        fused: Vec<f32>,
        out_dim: usize,
    },
    /// Packed convolution over patch planes.
    PackedConv {
        name: String,
        mats: Vec<PackedMatrix>,
        nbits: usize,
        fused: Vec<f32>,
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    /// Per-path, per-channel folded threshold comparisons.
    Threshold {
        name: String,
        entries: Vec<Vec<ThresholdEntry>>,
    },
    /// Binary OR pooling on planes.
    OrPool { window: usize, stride: usize },
    /// Bit planes -> dense values via the merge bit weights.
    Merge { betas: Vec<f32> },
}

impl CompiledOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            CompiledOp::Linear { .. } => "linear",
            CompiledOp::Conv { .. } => "conv",
            CompiledOp::BnApply { .. } => "bn",
            CompiledOp::Split => "split",
            CompiledOp::SplitFolded { .. } => "split_folded",
            CompiledOp::PackedLinear { .. } => "packed_linear",
            CompiledOp::PackedConv { .. } => "packed_conv",
            CompiledOp::Threshold { .. } => "threshold",
            CompiledOp::OrPool { .. } => "or_pool",
            CompiledOp::Merge { .. } => "merge",
        }
    }
}

/// Execution state between compiled ops, per sample.
enum State {
    Dense { data: Vec<f32>, dims: Vec<usize> },
    Planes { planes: Vec<BitPlane>, dims: Vec<usize> },
    PathVals { vals: Vec<Vec<f32>>, dims: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct CompiledModel {
    pub k: usize,
    pub n: usize,
    pub ops: Vec<CompiledOp>,
    pub num_classes: usize,
}

/// Fold and pack a trained model for packed inference.
pub fn compile(model: &Model) -> Result<CompiledModel> {
    let act_betas = model.act_betas();
    let mut ops = Vec::new();
    let mut in_paths = false;
    let mut i = 0usize;
    while i < model.specs.len() {
        let spec = &model.specs[i];
        match &spec.kind {
            LayerKind::Dense { in_dim, out_dim, bias } => {
                let w = model.params[&format!("{}.w", spec.name)].clone();
                if spec.quantized {
                    let qw = quant::quantize_weights(&w, model.n)?;
                    let mats = binlinalg::pack_weight_matrix(&qw, *out_dim, *in_dim)?;
                    let fused = act_betas.iter().map(|&b| qw.fused_scale(b)).collect();
                    ops.push(CompiledOp::PackedLinear {
                        name: spec.name.clone(),
                        mats,
                        nbits: model.n,
                        fused,
                        out_dim: *out_dim,
                    });
                } else {
                    let b = if *bias {
                        Some(model.params[&format!("{}.b", spec.name)].clone())
                    } else {
                        None
                    };
                    ops.push(CompiledOp::Linear {
                        name: spec.name.clone(),
                        w,
                        b,
                    });
                }
            }
            LayerKind::Conv2d { c_in, c_out, kh, kw, stride, pad } => {
                let w = &model.params[&format!("{}.w", spec.name)];
                if spec.quantized {
                    let qw = quant::quantize_weights(w, model.n)?;
                    let mats = binlinalg::pack_weight_matrix(&qw, *c_out, c_in * kh * kw)?;
                    let fused = act_betas.iter().map(|&b| qw.fused_scale(b)).collect();
                    ops.push(CompiledOp::PackedConv {
                        name: spec.name.clone(),
                        mats,
                        nbits: model.n,
                        fused,
                        c_in: *c_in,
                        c_out: *c_out,
                        kh: *kh,
                        kw: *kw,
                        stride: *stride,
                        pad: *pad,
                    });
                } else {
                    let w_flat = Tensor::from_vec(&[*c_out, c_in * kh * kw], w.data.clone())?;
                    ops.push(CompiledOp::Conv {
                        name: spec.name.clone(),
                        w_flat,
                        c_in: *c_in,
                        c_out: *c_out,
                        kh: *kh,
                        kw: *kw,
                        stride: *stride,
                        pad: *pad,
                    });
                }
            }
            LayerKind::BatchNorm { channels } => {
                let gamma = &model.params[&format!("{}.gamma", spec.name)];
                let shift = &model.params[&format!("{}.beta", spec.name)];
                let next_is_act = model
                    .specs
                    .get(i + 1)
                    .map(|s| s.kind == LayerKind::BinaryAct)
                    .unwrap_or(false);
                let next_is_split = model
                    .specs
                    .get(i + 1)
                    .map(|s| s.kind == LayerKind::BitSplit)
                    .unwrap_or(false);
                if next_is_split {
                    // fold into the splitting layer: one threshold per code
                    // level boundary (m - 0.5)/(2^k - 1), per channel
                    let rm = &model.buffers[&format!("{}.running_mean.0", spec.name)];
                    let rv = &model.buffers[&format!("{}.running_var.0", spec.name)];
                    let entries = split_fold_entries(
                        gamma, shift, rm, rv, *channels, model.k,
                    );
                    ops.push(CompiledOp::SplitFolded {
                        name: spec.name.clone(),
                        entries,
                    });
                    in_paths = true;
                    i += 2;
                    continue;
                }
                if next_is_act {
                    let paths = if in_paths { model.k } else { 1 };
                    let mut entries = Vec::with_capacity(paths);
                    for p in 0..paths {
                        let rm = &model.buffers[&format!("{}.running_mean.{p}", spec.name)];
                        let rv = &model.buffers[&format!("{}.running_var.{p}", spec.name)];
                        let beta = act_betas[p.min(act_betas.len() - 1)];
                        entries.push(
                            (0..*channels)
                                .map(|c| {
                                    quant::fold_bn_threshold(
                                        gamma.data[c],
                                        shift.data[c],
                                        rm.data[c],
                                        rv.data[c],
                                        super::BN_EPS,
                                        0.5,
                                    )
                                    .with_output_beta(beta)
                                })
                                .collect(),
                        );
                    }
                    ops.push(CompiledOp::Threshold {
                        name: spec.name.clone(),
                        entries,
                    });
                    i += 2;
                    continue;
                } else if !in_paths {
                    let rm = model.buffers[&format!("{}.running_mean.0", spec.name)].clone();
                    let rv = model.buffers[&format!("{}.running_var.0", spec.name)].clone();
                    ops.push(CompiledOp::BnApply {
                        name: spec.name.clone(),
                        gamma: gamma.clone(),
                        shift: shift.clone(),
                        mean: rm,
                        var: rv,
                    });
                } else {
                    return Err(Error::InvalidState(format!(
                        "{}: batch-norm on bit paths must be followed by a binary activation",
                        spec.name
                    )));
                }
            }
            LayerKind::BitSplit => {
                ops.push(CompiledOp::Split);
                in_paths = true;
            }
            LayerKind::BinaryAct => {
                // no preceding BN: fold the bare 0.5 threshold alone
                let paths = if in_paths { model.k } else { 1 };
                let mut entries = Vec::with_capacity(paths);
                for p in 0..paths {
                    let beta = act_betas[p.min(act_betas.len() - 1)];
                    entries.push(vec![ThresholdEntry {
                        threshold: 0.5,
                        dir: quant::CmpDir::Ge,
                        output_beta: beta,
                    }]);
                }
                ops.push(CompiledOp::Threshold {
                    name: spec.name.clone(),
                    entries,
                });
            }
            LayerKind::BitMerge => {
                ops.push(CompiledOp::Merge {
                    betas: model.merge_betas.clone(),
                });
                in_paths = false;
            }
            LayerKind::MaxPool { window, stride } => {
                if !in_paths {
                    return Err(Error::InvalidState(
                        "max-pool outside the bit paths is not supported in compiled form".into(),
                    ));
                }
                ops.push(CompiledOp::OrPool {
                    window: *window,
                    stride: *stride,
                });
            }
            LayerKind::Relu => {
                return Err(Error::InvalidState(
                    "relu is not part of the packed inference form".into(),
                ));
            }
            LayerKind::SoftmaxXent => {}
        }
        i += 1;
    }
    Ok(CompiledModel {
        k: model.k,
        n: model.n,
        ops,
        num_classes: model.num_classes(),
    })
}

impl CompiledModel {
    /// Index of the splitting op (raw or folded).
    fn split_index(&self) -> usize {
        self.ops
            .iter()
            .position(|op| matches!(op, CompiledOp::Split | CompiledOp::SplitFolded { .. }))
            .unwrap_or(0)
    }

    /// True when no BN op survives after the split (the packed path).
    pub fn packed_path_has_no_bn(&self) -> bool {
        self.ops[self.split_index()..]
            .iter()
            .all(|op| !matches!(op, CompiledOp::BnApply { .. }))
    }

    /// Op kind names between split and merge, for structural audits.
    pub fn packed_path_kinds(&self) -> Vec<&'static str> {
        let start = self.split_index();
        let end = self
            .ops
            .iter()
            .position(|op| matches!(op, CompiledOp::Merge { .. }))
            .unwrap_or(self.ops.len());
        self.ops[start + 1..end].iter().map(|op| op.kind_name()).collect()
    }

    /// Forward one sample (flat values, with its per-sample dims) to logits.
    pub fn forward_sample(&self, sample: &[f32], dims: &[usize]) -> Result<Vec<f32>> {
        let mut state = State::Dense {
            data: sample.to_vec(),
            dims: dims.to_vec(),
        };
        for op in &self.ops {
            state = self.apply(op, state)?;
        }
        match state {
            State::Dense { data, .. } => Ok(data),
            _ => Err(Error::InvalidState("compiled network ended on bit planes".into())),
        }
    }

    /// Forward one sample, timing each op. Returns the logits and
    /// `(op label, nanoseconds)` in execution order.
    pub fn forward_sample_timed(&self, sample: &[f32], dims: &[usize]) -> Result<TimedForward> {
        let mut state = State::Dense {
            data: sample.to_vec(),
            dims: dims.to_vec(),
        };
        let mut times = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            let t0 = std::time::Instant::now();
            state = self.apply(op, state)?;
            times.push((op_label(op), t0.elapsed().as_nanos() as u64));
        }
        match state {
            State::Dense { data, .. } => Ok((data, times)),
            _ => Err(Error::InvalidState("compiled network ended on bit planes".into())),
        }
    }

    /// Forward a `[batch, ...]` tensor; returns `[batch, classes]` logits.
    pub fn forward_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let bsz = batch.shape[0];
        let dims: Vec<usize> = batch.shape[1..].to_vec();
        let per = batch.numel() / bsz;
        let mut out = Vec::with_capacity(bsz * self.num_classes);
        for b in 0..bsz {
            let logits = self.forward_sample(&batch.data[b * per..(b + 1) * per], &dims)?;
            out.extend_from_slice(&logits);
        }
        Tensor::from_vec(&[bsz, self.num_classes], out)
    }

    fn apply(&self, op: &CompiledOp, state: State) -> Result<State> {
        match (op, state) {
            (CompiledOp::Linear { w, b, .. }, State::Dense { data, .. }) => {
                let x = Tensor::from_vec(&[1, data.len()], data)?;
                let y = layers::linear_forward(&x, w, b.as_ref())?;
                let dims = vec![w.shape[0]];
                Ok(State::Dense { data: y.data, dims })
            }
            (CompiledOp::Conv { w_flat, c_in, c_out, kh, kw, stride, pad, .. }, State::Dense { data, dims }) => {
                let (h, w_dim) = conv_dims(&dims, *c_in, data.len())?;
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
                geom.check()?;
                let x = Tensor::from_vec(&[1, *c_in, h, w_dim], data)?;
                let cols = layers::im2col(&x, &geom)?;
                let y = layers::conv_forward_from_cols(&cols, w_flat, &geom, 1)?;
                let (oh, ow) = geom.out_hw();
                Ok(State::Dense {
                    data: y.data,
                    dims: vec![*c_out, oh, ow],
                })
            }
            (CompiledOp::BnApply { gamma, shift, mean, var, .. }, State::Dense { data, dims }) => {
                let channels = gamma.numel();
                if data.len() % channels != 0 {
                    return Err(invalid_arg!("bn channels do not divide activation size"));
                }
                let spatial = data.len() / channels;
                let x = Tensor::from_vec(&[1, channels, spatial], data)?;
                let y = layers::bn_forward_infer(&x, gamma, shift, mean, var, channels, spatial, super::BN_EPS)?;
                Ok(State::Dense { data: y.data, dims })
            }
            (CompiledOp::Split, State::Dense { data, dims }) => {
                let codes = quant::split_codes(&data, self.k);
                let planes = (1..=self.k)
                    .map(|i| BitPlane::from_fn(codes.len(), |j| (codes[j] >> (self.k - i)) & 1 == 1))
                    .collect();
                Ok(State::Planes { planes, dims })
            }
            (CompiledOp::SplitFolded { entries, .. }, State::Dense { data, dims }) => {
                let channels = entries[0].len();
                let spatial = data.len() / channels;
                let codes: Vec<u32> = (0..data.len())
                    .map(|j| folded_code(entries, j / spatial, data[j]))
                    .collect();
                let planes = (1..=self.k)
                    .map(|i| BitPlane::from_fn(codes.len(), |j| (codes[j] >> (self.k - i)) & 1 == 1))
                    .collect();
                Ok(State::Planes { planes, dims })
            }
            (CompiledOp::PackedLinear { mats, nbits, fused, out_dim, .. }, State::Planes { planes, .. }) => {
                let mut vals = Vec::with_capacity(planes.len());
                for (p, plane) in planes.iter().enumerate() {
                    let per_plane: Vec<Vec<i32>> = mats
                        .iter()
                        .map(|m| binlinalg::packed_matvec(m, plane, binlinalg::Mode::And))
                        .collect::<Result<_>>()?;
                    let scale = fused[p];
                    let mut y = Vec::with_capacity(*out_dim);
                    for r in 0..*out_dim {
                        let mut acc = 0i32;
                        for (l, v) in per_plane.iter().enumerate() {
                            acc += v[r] << (nbits - 1 - l);
                        }
                        y.push(scale * acc as f32);
                    }
                    vals.push(y);
                }
                Ok(State::PathVals {
                    vals,
                    dims: vec![*out_dim],
                })
            }
            (
                CompiledOp::PackedConv { mats, nbits, fused, c_in, c_out, kh, kw, stride, pad, .. },
                State::Planes { planes, dims },
            ) => {
                let total = planes[0].len();
                let (h, w_dim) = conv_dims(&dims, *c_in, total)?;
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (w_dim + 2 * pad - kw) / stride + 1;
                let mut vals = Vec::with_capacity(planes.len());
                for (p, plane) in planes.iter().enumerate() {
                    let patches =
                        binlinalg::extract_patches(plane, *c_in, h, w_dim, *kh, *kw, *stride, *pad)?;
                    let ones: Vec<usize> = patches.iter().map(|pt| pt.popcount()).collect();
                    let scale = fused[p];
                    let mut y = vec![0.0f32; c_out * oh * ow];
                    for o in 0..*c_out {
                        for (pos, patch) in patches.iter().enumerate() {
                            let mut acc = 0i32;
                            for (l, m) in mats.iter().enumerate() {
                                let d = binlinalg::and_dot(patch, &m.planes[o], ones[pos])?;
                                acc += d << (nbits - 1 - l);
                            }
                            y[o * oh * ow + pos] = scale * acc as f32;
                        }
                    }
                    vals.push(y);
                }
                Ok(State::PathVals {
                    vals,
                    dims: vec![*c_out, oh, ow],
                })
            }
            (CompiledOp::Threshold { entries, .. }, State::PathVals { vals, dims }) => {
                let mut planes = Vec::with_capacity(vals.len());
                for (p, y) in vals.iter().enumerate() {
                    let row = &entries[p];
                    let plane = if row.len() == 1 {
                        // bare activation threshold, same entry for every unit
                        let e = row[0];
                        BitPlane::from_fn(y.len(), |j| e.fires(y[j]))
                    } else {
                        let channels = row.len();
                        let spatial = y.len() / channels;
                        BitPlane::from_fn(y.len(), |j| row[j / spatial].fires(y[j]))
                    };
                    planes.push(plane);
                }
                Ok(State::Planes { planes, dims })
            }
            (CompiledOp::OrPool { window, stride }, State::Planes { planes, dims }) => {
                if dims.len() != 3 {
                    return Err(invalid_arg!("or_pool needs [c,h,w] planes, got {dims:?}"));
                }
                let (c, h, w_dim) = (dims[0], dims[1], dims[2]);
                let mut pooled = Vec::with_capacity(planes.len());
                for plane in &planes {
                    pooled.push(binlinalg::binary_maxpool_chw(plane, c, h, w_dim, *window, *stride)?);
                }
                let oh = (h - window) / stride + 1;
                let ow = (w_dim - window) / stride + 1;
                Ok(State::Planes {
                    planes: pooled,
                    dims: vec![c, oh, ow],
                })
            }
            (CompiledOp::Merge { betas }, State::Planes { planes, dims }) => {
                let len = planes[0].len();
                let mut merged = vec![0.0f64; len];
                for (p, plane) in planes.iter().enumerate() {
                    let b = betas[p] as f64;
                    for (j, m) in merged.iter_mut().enumerate() {
                        if plane.get(j) {
                            *m += b;
                        }
                    }
                }
                Ok(State::Dense {
                    data: merged.into_iter().map(|v| v as f32).collect(),
                    dims,
                })
            }
            (op, _) => Err(Error::InvalidState(format!(
                "compiled op {} applied to an incompatible state",
                op.kind_name()
            ))),
        }
    }
}

/// Per-boundary, per-channel thresholds: `entries[m][c]`.
pub(crate) type LevelThresholds = Vec<Vec<ThresholdEntry>>;

/// Thresholds that replace BN + bit splitting: boundary m (1-based) of the
/// 2^k - 1 code levels fires when `BN(x) >= (m - 0.5) / (2^k - 1)`; the
/// code is the count of fired boundaries.
pub(crate) fn split_fold_entries(
    gamma: &Tensor,
    shift: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    channels: usize,
    k: usize,
) -> LevelThresholds {
    let levels = (1u32 << k) - 1;
    (1..=levels)
        .map(|m| {
            let boundary = (m as f32 - 0.5) / levels as f32;
            (0..channels)
                .map(|c| {
                    quant::fold_bn_threshold(
                        gamma.data[c],
                        shift.data[c],
                        mean.data[c],
                        var.data[c],
                        super::BN_EPS,
                        boundary,
                    )
                })
                .collect()
        })
        .collect()
}

/// Count-of-fired-boundaries code for one value in one channel.
#[inline]
pub(crate) fn folded_code(entries: &[Vec<ThresholdEntry>], channel: usize, x: f32) -> u32 {
    entries
        .iter()
        .map(|row| row[channel].fires(x) as u32)
        .sum()
}

fn op_label(op: &CompiledOp) -> String {
    match op {
        CompiledOp::Linear { name, .. }
        | CompiledOp::Conv { name, .. }
        | CompiledOp::BnApply { name, .. }
        | CompiledOp::PackedLinear { name, .. }
        | CompiledOp::PackedConv { name, .. }
        | CompiledOp::Threshold { name, .. }
        | CompiledOp::SplitFolded { name, .. } => format!("{}:{}", op.kind_name(), name),
        other => other.kind_name().to_string(),
    }
}

fn conv_dims(dims: &[usize], c_in: usize, total: usize) -> Result<(usize, usize)> {
    if dims.len() == 3 && dims[0] == c_in {
        return Ok((dims[1], dims[2]));
    }
    let per = total / c_in;
    let side = (per as f64).sqrt().round() as usize;
    if side * side == per {
        Ok((side, side))
    } else {
        Err(invalid_arg!("cannot infer conv dims from {dims:?}"))
    }
}
