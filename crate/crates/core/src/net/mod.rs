//! Layer graph and execution: forward/backward over k independent bit
//! paths with shared weights, plus compilation to the packed inference form.
//!
//! Three execution modes:
//! - `Train`: dense tensors, batch-statistic BN, records a tape for the
//!   hand-coded backward pass.
//! - `InferReference`: dense tensors, running-statistic BN with the
//!   threshold comparison already folded (same decisions as the packed
//!   path, no bit packing).
//! - `InferPacked`: compiled bit planes, integer popcount kernels, folded
//!   thresholds. Produces logits identical to `InferReference`.

pub mod compile;
pub mod layers;
pub mod topology;
pub mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::quant;
use crate::tensor::{gemm, gemm_bt, transpose, Tensor};

use layers::{BnCache, ConvGeom};

pub use compile::CompiledModel;

type BufferUpdates = Vec<(String, Tensor)>;
type InterpretOutput = (Tensor, Option<Tape>, BufferUpdates);

/// Default BN epsilon.
pub const BN_EPS: f32 = 1e-5;
/// Running-statistics update rate (`new = (1-m)*old + m*batch`).
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Train,
    InferReference,
    InferPacked,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub enum LayerKind {
    Dense {
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        channels: usize,
    },
    BitSplit,
    BinaryAct,
    BitMerge,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Relu,
    SoftmaxXent,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Dense/Conv2d only: quantize weights to the model's n bits.
    pub quantized: bool,
}

impl LayerSpec {
    pub fn new(name: &str, kind: LayerKind, quantized: bool) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
            quantized,
        }
    }
}

/// Training hyper-parameters carried in the model manifest.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Hyper {
    pub optimizer: String, // "sgd" | "adam"
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay: f32,
}

impl Default for Hyper {
    fn default() -> Self {
        // LeNet-5 / MNIST column: SGD, momentum 0.9, lr 0.1, batch 100,
        // 50 epochs, decay 0.5 at epochs 15/30/45, weight decay 1e-5.
        Hyper {
            optimizer: "sgd".into(),
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 100,
            epochs: 50,
            lr_decay_epochs: vec![15, 30, 45],
            lr_decay: 0.5,
        }
    }
}

/// Dense tensors flowing between layers: one tensor before the split and
/// after the merge, one per bit path in between.
#[derive(Clone, Debug)]
enum Flow {
    Single(Tensor),
    Paths(Vec<Tensor>),
}

enum Cache {
    Linear {
        x: Tensor,
        name: String,
        bias: bool,
    },
    LinearQ {
        x_paths: Vec<Tensor>,
        levels: Tensor,
        alpha: f32,
        name: String,
    },
    Conv {
        cols: Tensor,
        geom: ConvGeom,
        batch: usize,
        name: String,
    },
    ConvQ {
        ind_cols: Vec<Tensor>,
        levels_flat: Tensor,
        alpha: f32,
        geom: ConvGeom,
        batch: usize,
        name: String,
        in_shape: Vec<usize>,
    },
    Bn {
        caches: Vec<BnCache>,
        channels: usize,
        spatial: usize,
        name: String,
    },
    Split {
        x: Tensor,
    },
    Act,
    Merge {
        bits: Vec<Tensor>,
    },
    Pool {
        argmax: Vec<Vec<usize>>,
        in_shape: Vec<usize>,
        on_paths: bool,
    },
    Relu {
        x: Tensor,
    },
}

struct Tape {
    caches: Vec<Cache>,
    logits: Tensor,
}

/// The model: declarative layer specs plus named full-precision master
/// parameters. Quantized views are regenerated from the master weights at
/// every step, so all k bit paths share one weight storage by construction.
pub struct Model {
    pub specs: Vec<LayerSpec>,
    /// Activation bits.
    pub k: usize,
    /// Weight bits for quantized layers.
    pub n: usize,
    pub trainable_beta: bool,
    /// Merge-layer bit weights; equal to the fixed betas unless trained.
    pub merge_betas: Vec<f32>,
    /// Learnable parameters (master weights, BN affine, optional betas).
    pub params: BTreeMap<String, Tensor>,
    /// Non-learnable state: per-path BN running statistics.
    pub buffers: BTreeMap<String, Tensor>,
    pub hyper: Hyper,
    tape: Option<Tape>,
}

impl Model {
    /// Wire a spec list: allocate parameters (seeded He init) and per-path
    /// BN buffers. The path arity at each layer follows the split/merge
    /// positions.
    pub fn new(specs: Vec<LayerSpec>, k: usize, n: usize, hyper: Hyper, seed: u64) -> Result<Model> {
        if !(1..=quant::MAX_BITS).contains(&k) || !(1..=quant::MAX_BITS).contains(&n) {
            return Err(invalid_arg!("k and n must be in [1, {}]", quant::MAX_BITS));
        }
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut paths = 1usize;
        let mut split_seen = 0usize;
        let mut merge_seen = 0usize;
        let mut param_seed = seed;
        for spec in &specs {
            match &spec.kind {
                LayerKind::Dense { in_dim, out_dim, bias } => {
                    param_seed = param_seed.wrapping_add(0x9E37_79B9).rotate_left(13);
                    let w = crate::tensor::he_init(&[*out_dim, *in_dim], *in_dim, param_seed)?;
                    params.insert(format!("{}.w", spec.name), w);
                    if *bias {
                        params.insert(format!("{}.b", spec.name), Tensor::zeros(&[*out_dim]));
                    }
                }
                LayerKind::Conv2d { c_in, c_out, kh, kw, .. } => {
                    param_seed = param_seed.wrapping_add(0x9E37_79B9).rotate_left(13);
                    let fan_in = c_in * kh * kw;
                    let w = crate::tensor::he_init(&[*c_out, *c_in, *kh, *kw], fan_in, param_seed)?;
                    params.insert(format!("{}.w", spec.name), w);
                }
                LayerKind::BatchNorm { channels } => {
                    params.insert(
                        format!("{}.gamma", spec.name),
                        Tensor::from_vec(&[*channels], vec![1.0; *channels])?,
                    );
                    params.insert(format!("{}.beta", spec.name), Tensor::zeros(&[*channels]));
                    for p in 0..paths {
                        buffers.insert(
                            format!("{}.running_mean.{p}", spec.name),
                            Tensor::zeros(&[*channels]),
                        );
                        buffers.insert(
                            format!("{}.running_var.{p}", spec.name),
                            Tensor::from_vec(&[*channels], vec![1.0; *channels])?,
                        );
                    }
                }
                LayerKind::BitSplit => {
                    split_seen += 1;
                    paths = k;
                }
                LayerKind::BitMerge => {
                    merge_seen += 1;
                    paths = 1;
                }
                _ => {}
            }
        }
        if !(split_seen == 1 && merge_seen == 1 || split_seen == 0 && merge_seen == 0) {
            return Err(invalid_arg!(
                "a model needs exactly one bit_split and one bit_merge, or neither (got {split_seen}/{merge_seen})"
            ));
        }
        let merge_betas = quant::betas(k);
        Ok(Model {
            specs,
            k,
            n,
            trainable_beta: false,
            merge_betas,
            params,
            buffers,
            hyper,
            tape: None,
        })
    }

    /// Enable trainable merge bit-weights (registered as a parameter that
    /// the optimizer steps at a 10x smaller learning rate).
    pub fn enable_trainable_beta(&mut self) {
        self.trainable_beta = true;
        self.params.insert(
            "merge.betas".into(),
            Tensor::from_vec(&[self.k], self.merge_betas.clone()).expect("k betas"),
        );
    }

    /// Total learnable parameter count (buffers excluded).
    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.specs
            .iter()
            .rev()
            .find_map(|s| match s.kind {
                LayerKind::Dense { out_dim, .. } => Some(out_dim),
                _ => None,
            })
            .unwrap_or(0)
    }

    fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| invalid_arg!("missing parameter {name}"))
    }

    fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| invalid_arg!("missing buffer {name}"))
    }

    /// Fixed per-path activation bit weights (Alg. betas for the model's k).
    pub fn act_betas(&self) -> Vec<f32> {
        quant::betas(self.k)
    }

    /// Run the network; returns logits `[batch, classes]`.
    pub fn forward(&mut self, batch: &Tensor, mode: ExecMode) -> Result<Tensor> {
        match mode {
            ExecMode::Train => {
                let (logits, tape, updates) = self.interpret(batch, true)?;
                for (name, value) in updates {
                    self.buffers.insert(name, value);
                }
                self.tape = tape;
                Ok(logits)
            }
            ExecMode::InferReference => {
                let (logits, _, _) = self.interpret(batch, false)?;
                Ok(logits)
            }
            ExecMode::InferPacked => {
                let compiled = compile::compile(self)?;
                compiled.forward_batch(batch)
            }
        }
    }

    /// Backward pass from the most recent training-mode forward. Returns
    /// the mean loss and gradients keyed like `params`.
    pub fn backward(&mut self, labels: &[u32]) -> Result<(f32, BTreeMap<String, Tensor>)> {
        let tape = self.tape.take().ok_or_else(|| {
            Error::InvalidState("backward called before a training-mode forward".into())
        })?;
        let (loss, dlogits) = layers::softmax_xent(&tape.logits, labels)?;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut flow = FlowGrad::Single(dlogits);
        let act_betas = self.act_betas();

        for cache in tape.caches.iter().rev() {
            flow = match cache {
                Cache::Linear { x, name, bias } => {
                    let g = flow.single()?;
                    let w = self.param(&format!("{name}.w"))?;
                    let (dx, dw, db) = layers::linear_backward(x, w, &g, *bias)?;
                    accumulate(&mut grads, format!("{name}.w"), dw);
                    if let Some(db) = db {
                        accumulate(&mut grads, format!("{name}.b"), db);
                    }
                    FlowGrad::Single(dx)
                }
                Cache::LinearQ { x_paths, levels, alpha, name } => {
                    let gs = flow.paths()?;
                    let s = quant::plane_scale(*alpha, self.n);
                    let deq = levels.map(|q| s * q);
                    let mut dxs = Vec::with_capacity(gs.len());
                    let (out_dim, in_dim) = (levels.shape[0], levels.shape[1]);
                    for (g, x) in gs.iter().zip(x_paths) {
                        let batch = g.shape[0];
                        let mut dx = vec![0.0f32; batch * in_dim];
                        gemm(&g.data, &deq.data, &mut dx, batch, out_dim, in_dim);
                        dxs.push(Tensor::from_vec(&x.shape, dx)?);
                        // dW accumulates every path's contribution (shared weights)
                        let mut gt = vec![0.0f32; batch * out_dim];
                        transpose(&g.data, &mut gt, batch, out_dim);
                        let mut dw = vec![0.0f32; out_dim * in_dim];
                        gemm(&gt, &x.data, &mut dw, out_dim, batch, in_dim);
                        accumulate(
                            &mut grads,
                            format!("{name}.w"),
                            Tensor::from_vec(&levels.shape, dw)?,
                        );
                    }
                    FlowGrad::Paths(dxs)
                }
                Cache::Conv { cols, geom, batch, name } => {
                    let g = flow.single()?;
                    let w = self.param(&format!("{name}.w"))?;
                    let w_flat = Tensor::from_vec(&[geom.c_out, geom.patch_len()], w.data.clone())?;
                    let (dcols, dw) = layers::conv_backward_to_cols(cols, &w_flat, &g, geom, *batch)?;
                    let dx = layers::col2im(&dcols, geom, *batch)?;
                    accumulate(
                        &mut grads,
                        format!("{name}.w"),
                        Tensor::from_vec(&w.shape, dw.data)?,
                    );
                    FlowGrad::Single(dx)
                }
                Cache::ConvQ { ind_cols, levels_flat, alpha, geom, batch, name, in_shape } => {
                    let gs = flow.paths()?;
                    let s = quant::plane_scale(*alpha, self.n);
                    let w_flat = levels_flat.map(|q| s * q);
                    let mut dxs = Vec::with_capacity(gs.len());
                    for (p, (g, ind)) in gs.iter().zip(ind_cols).enumerate() {
                        let (dcols, dw_ind) =
                            layers::conv_backward_to_cols(ind, &w_flat, g, geom, *batch)?;
                        let dx = layers::col2im(&dcols, geom, *batch)?;
                        dxs.push(Tensor::from_vec(in_shape, dx.data)?);
                        // inputs were beta-scaled bits; the cached cols hold the bits
                        let beta = act_betas[p];
                        let dw = dw_ind.map(|v| v * beta);
                        let w_shape = self.param(&format!("{name}.w"))?.shape.clone();
                        accumulate(
                            &mut grads,
                            format!("{name}.w"),
                            Tensor::from_vec(&w_shape, dw.data)?,
                        );
                    }
                    FlowGrad::Paths(dxs)
                }
                Cache::Bn { caches, channels, spatial, name } => {
                    let gamma = self.param(&format!("{name}.gamma"))?;
                    match (&flow, caches.len()) {
                        (FlowGrad::Single(g), 1) => {
                            let (dx, dgamma, dshift) =
                                layers::bn_backward(&caches[0], gamma, g, *channels, *spatial)?;
                            accumulate(&mut grads, format!("{name}.gamma"), dgamma);
                            accumulate(&mut grads, format!("{name}.beta"), dshift);
                            FlowGrad::Single(dx)
                        }
                        (FlowGrad::Paths(gs), _) => {
                            let mut dxs = Vec::with_capacity(gs.len());
                            for (g, cache) in gs.iter().zip(caches) {
                                let (dx, dgamma, dshift) =
                                    layers::bn_backward(cache, gamma, g, *channels, *spatial)?;
                                accumulate(&mut grads, format!("{name}.gamma"), dgamma);
                                accumulate(&mut grads, format!("{name}.beta"), dshift);
                                dxs.push(dx);
                            }
                            FlowGrad::Paths(dxs)
                        }
                        _ => return Err(Error::InvalidState("bn cache arity mismatch".into())),
                    }
                }
                Cache::Split { x } => {
                    let gs = flow.paths()?;
                    let dx = quant::bit_split_backward(&gs, x, &quant::betas(self.k))?;
                    FlowGrad::Single(dx)
                }
                Cache::Act => {
                    let gs = flow.paths()?;
                    let mut dxs = Vec::with_capacity(gs.len());
                    for (p, g) in gs.iter().enumerate() {
                        dxs.push(quant::binary_activation_backward(g, p + 1, self.k)?);
                    }
                    FlowGrad::Paths(dxs)
                }
                Cache::Merge { bits } => {
                    let g = flow.single()?;
                    let fixed = quant::betas(self.k);
                    let mut gs = Vec::with_capacity(self.k);
                    for (&mb, &fb) in self.merge_betas.iter().zip(&fixed) {
                        // chain to the path value: bit = value / beta_fixed
                        let ratio = mb / fb;
                        gs.push(g.map(|v| v * ratio));
                    }
                    if self.trainable_beta {
                        let mut dbeta = vec![0.0f32; self.k];
                        for p in 0..self.k {
                            dbeta[p] = quant::beta_gradient(&g, &bits[p])?;
                        }
                        accumulate(
                            &mut grads,
                            "merge.betas".into(),
                            Tensor::from_vec(&[self.k], dbeta)?,
                        );
                    }
                    FlowGrad::Paths(gs)
                }
                Cache::Pool { argmax, in_shape, on_paths } => {
                    let gs = flow.paths_or_single();
                    let mut dxs = Vec::with_capacity(gs.len());
                    for (g, arg) in gs.iter().zip(argmax) {
                        dxs.push(layers::maxpool_backward(g, arg, in_shape)?);
                    }
                    if *on_paths {
                        FlowGrad::Paths(dxs)
                    } else {
                        FlowGrad::Single(dxs.pop().expect("one grad"))
                    }
                }
                Cache::Relu { x } => {
                    let g = flow.single()?;
                    FlowGrad::Single(layers::relu_backward(x, &g))
                }
            };
        }
        Ok((loss, grads))
    }

    /// Interpret the spec list densely. `train` selects batch statistics,
    /// tape recording, and explicit BN; otherwise running statistics with
    /// folded threshold decisions.
    fn interpret(&self, batch: &Tensor, train: bool) -> Result<InterpretOutput> {
        if batch.shape.is_empty() || batch.shape[0] == 0 {
            return Err(invalid_arg!("empty batch"));
        }
        let bsz = batch.shape[0];
        let act_betas = self.act_betas();
        let mut flow = Flow::Single(batch.clone());
        let mut caches: Vec<Cache> = Vec::new();
        let mut updates: BufferUpdates = Vec::new();
        let mut logits: Option<Tensor> = None;

        let mut i = 0usize;
        while i < self.specs.len() {
            let spec = &self.specs[i];
            match (&spec.kind, &mut flow) {
                (LayerKind::Dense { in_dim, out_dim, bias }, Flow::Single(x)) => {
                    if spec.quantized {
                        return Err(invalid_arg!(
                            "{}: quantized dense layer outside the split paths",
                            spec.name
                        ));
                    }
                    let x2 = reshape_batch(x, bsz, &[*in_dim])?;
                    let w = self.param(&format!("{}.w", spec.name))?;
                    let b = if *bias {
                        Some(self.param(&format!("{}.b", spec.name))?)
                    } else {
                        None
                    };
                    let y = layers::linear_forward(&x2, w, b)?;
                    if train {
                        caches.push(Cache::Linear {
                            x: x2,
                            name: spec.name.clone(),
                            bias: *bias,
                        });
                    }
                    let _ = out_dim;
                    flow = Flow::Single(y);
                }
                (LayerKind::Dense { in_dim, out_dim, .. }, Flow::Paths(xs)) => {
                    if !spec.quantized {
                        return Err(invalid_arg!(
                            "{}: full-precision dense layers are not supported on bit paths",
                            spec.name
                        ));
                    }
                    let w = self.param(&format!("{}.w", spec.name))?;
                    let (levels, alpha) = quant::quantize_levels(w, self.n)?;
                    let mut ys = Vec::with_capacity(xs.len());
                    let mut cached = Vec::with_capacity(xs.len());
                    for (p, x) in xs.iter().enumerate() {
                        let x2 = reshape_batch(x, bsz, &[*in_dim])?;
                        let ind = x2.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                        let mut raw = vec![0.0f32; bsz * out_dim];
                        gemm_bt(&ind.data, &levels.data, &mut raw, bsz, *in_dim, *out_dim);
                        let scale = quant::fused_scale(act_betas[p], alpha, self.n);
                        let y: Vec<f32> = raw.iter().map(|&v| scale * v).collect();
                        ys.push(Tensor::from_vec(&[bsz, *out_dim], y)?);
                        cached.push(x2);
                    }
                    if train {
                        caches.push(Cache::LinearQ {
                            x_paths: cached,
                            levels,
                            alpha,
                            name: spec.name.clone(),
                        });
                    }
                    flow = Flow::Paths(ys);
                }
                (LayerKind::Conv2d { c_in, c_out, kh, kw, stride, pad }, Flow::Single(x)) => {
                    if spec.quantized {
                        return Err(invalid_arg!(
                            "{}: quantized conv outside the split paths",
                            spec.name
                        ));
                    }
                    let (h, w_dim) = infer_hw(x, bsz, *c_in)?;
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
                    let x4 = reshape_batch(x, bsz, &[*c_in, h, w_dim])?;
                    let cols = layers::im2col(&x4, &geom)?;
                    let wt = self.param(&format!("{}.w", spec.name))?;
                    let w_flat = Tensor::from_vec(&[*c_out, geom.patch_len()], wt.data.clone())?;
                    let y = layers::conv_forward_from_cols(&cols, &w_flat, &geom, bsz)?;
                    if train {
                        caches.push(Cache::Conv {
                            cols,
                            geom,
                            batch: bsz,
                            name: spec.name.clone(),
                        });
                    }
                    flow = Flow::Single(y);
                }
                (LayerKind::Conv2d { c_in, c_out, kh, kw, stride, pad }, Flow::Paths(xs)) => {
                    if !spec.quantized {
                        return Err(invalid_arg!(
                            "{}: full-precision conv layers are not supported on bit paths",
                            spec.name
                        ));
                    }
                    let (h, w_dim) = infer_hw(&xs[0], bsz, *c_in)?;
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
                    let wt = self.param(&format!("{}.w", spec.name))?;
                    let (levels, alpha) = quant::quantize_levels(wt, self.n)?;
                    let lv_flat = Tensor::from_vec(&[*c_out, geom.patch_len()], levels.data)?;
                    let mut ys = Vec::with_capacity(xs.len());
                    let mut cached = Vec::with_capacity(xs.len());
                    let in_shape = vec![bsz, *c_in, h, w_dim];
                    for (p, x) in xs.iter().enumerate() {
                        let x4 = reshape_batch(x, bsz, &[*c_in, h, w_dim])?;
                        let ind = x4.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                        let cols = layers::im2col(&ind, &geom)?;
                        let raw = layers::conv_forward_from_cols(&cols, &lv_flat, &geom, bsz)?;
                        let scale = quant::fused_scale(act_betas[p], alpha, self.n);
                        ys.push(raw.map(|v| scale * v));
                        cached.push(cols);
                    }
                    if train {
                        caches.push(Cache::ConvQ {
                            ind_cols: cached,
                            levels_flat: lv_flat,
                            alpha,
                            geom,
                            batch: bsz,
                            name: spec.name.clone(),
                            in_shape,
                        });
                    }
                    flow = Flow::Paths(ys);
                }
                (LayerKind::BatchNorm { channels }, _) => {
                    let xs: Vec<&Tensor> = match &flow {
                        Flow::Single(x) => vec![x],
                        Flow::Paths(xs) => xs.iter().collect(),
                    };
                    let spatial = per_channel_spatial(xs[0], bsz, *channels)?;
                    let gamma = self.param(&format!("{}.gamma", spec.name))?;
                    let shift = self.param(&format!("{}.beta", spec.name))?;

                    if train {
                        let mut outs = Vec::with_capacity(xs.len());
                        let mut bn_caches = Vec::with_capacity(xs.len());
                        for (p, x) in xs.iter().enumerate() {
                            let x3 = reshape_batch(x, bsz, &[*channels, spatial])?;
                            let (y, cache) =
                                layers::bn_forward_train(&x3, gamma, shift, *channels, spatial, BN_EPS)?;
                            // running statistics: unbiased variance like the batch axis count
                            let count = (bsz * spatial) as f32;
                            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                            let rm_name = format!("{}.running_mean.{p}", spec.name);
                            let rv_name = format!("{}.running_var.{p}", spec.name);
                            let rm = self.buffer(&rm_name)?;
                            let rv = self.buffer(&rv_name)?;
                            let new_rm: Vec<f32> = rm
                                .data
                                .iter()
                                .zip(&cache.batch_mean)
                                .map(|(&old, &b)| (1.0 - BN_MOMENTUM) * old + BN_MOMENTUM * b)
                                .collect();
                            let new_rv: Vec<f32> = rv
                                .data
                                .iter()
                                .zip(&cache.batch_var)
                                .map(|(&old, &b)| (1.0 - BN_MOMENTUM) * old + BN_MOMENTUM * b * unbias)
                                .collect();
                            updates.push((rm_name, Tensor::from_vec(&[*channels], new_rm)?));
                            updates.push((rv_name, Tensor::from_vec(&[*channels], new_rv)?));
                            outs.push(Tensor::from_vec(&x.shape, y.data)?);
                            bn_caches.push(cache);
                        }
                        caches.push(Cache::Bn {
                            caches: bn_caches,
                            channels: *channels,
                            spatial,
                            name: spec.name.clone(),
                        });
                        flow = match flow {
                            Flow::Single(_) => Flow::Single(outs.pop().expect("one")),
                            Flow::Paths(_) => Flow::Paths(outs),
                        };
                    } else {
                        // inference: if a binary activation follows, fold BN
                        // into per-channel thresholds, and if the splitting
                        // layer follows, fold into its level boundaries
                        // (same decisions as the compiled path); otherwise
                        // apply BN with running stats.
                        let next_is_act = self
                            .specs
                            .get(i + 1)
                            .map(|s| s.kind == LayerKind::BinaryAct)
                            .unwrap_or(false);
                        let next_is_split = self
                            .specs
                            .get(i + 1)
                            .map(|s| s.kind == LayerKind::BitSplit)
                            .unwrap_or(false);
                        if next_is_split {
                            let x = match &flow {
                                Flow::Single(x) => x,
                                Flow::Paths(_) => {
                                    return Err(Error::InvalidState(
                                        "bit_split inside the bit paths".into(),
                                    ))
                                }
                            };
                            let rm = self.buffer(&format!("{}.running_mean.0", spec.name))?;
                            let rv = self.buffer(&format!("{}.running_var.0", spec.name))?;
                            let entries = compile::split_fold_entries(
                                gamma, shift, rm, rv, *channels, self.k,
                            );
                            let per = x.numel() / bsz;
                            let sp = per / *channels;
                            let codes: Vec<u32> = (0..x.numel())
                                .map(|j| compile::folded_code(&entries, (j % per) / sp, x.data[j]))
                                .collect();
                            let mut paths = Vec::with_capacity(self.k);
                            for i_bit in 1..=self.k {
                                let b = act_betas[i_bit - 1];
                                let data: Vec<f32> = codes
                                    .iter()
                                    .map(|&q| if (q >> (self.k - i_bit)) & 1 == 1 { b } else { 0.0 })
                                    .collect();
                                paths.push(Tensor::from_vec(&x.shape, data)?);
                            }
                            flow = Flow::Paths(paths);
                            i += 2; // consumed the BitSplit as well
                            continue;
                        }
                        if next_is_act {
                            let mut outs = Vec::with_capacity(xs.len());
                            for (p, x) in xs.iter().enumerate() {
                                let rm = self.buffer(&format!("{}.running_mean.{p}", spec.name))?;
                                let rv = self.buffer(&format!("{}.running_var.{p}", spec.name))?;
                                let entries: Vec<quant::ThresholdEntry> = (0..*channels)
                                    .map(|c| {
                                        quant::fold_bn_threshold(
                                            gamma.data[c],
                                            shift.data[c],
                                            rm.data[c],
                                            rv.data[c],
                                            BN_EPS,
                                            0.5,
                                        )
                                    })
                                    .collect();
                                let beta = act_betas[p.min(act_betas.len() - 1)];
                                let mut y = vec![0.0f32; x.numel()];
                                for (j, yv) in y.iter_mut().enumerate() {
                                    let c = (j % (*channels * spatial)) / spatial;
                                    *yv = if entries[c].fires(x.data[j]) { beta } else { 0.0 };
                                }
                                outs.push(Tensor::from_vec(&x.shape, y)?);
                            }
                            flow = match flow {
                                Flow::Single(_) => Flow::Single(outs.pop().expect("one")),
                                Flow::Paths(_) => Flow::Paths(outs),
                            };
                            i += 2; // consumed the BinaryAct as well
                            continue;
                        } else {
                            let mut outs = Vec::with_capacity(xs.len());
                            for (p, x) in xs.iter().enumerate() {
                                let rm = self.buffer(&format!("{}.running_mean.{p}", spec.name))?;
                                let rv = self.buffer(&format!("{}.running_var.{p}", spec.name))?;
                                let x3 = reshape_batch(x, bsz, &[*channels, spatial])?;
                                let y = layers::bn_forward_infer(
                                    &x3, gamma, shift, rm, rv, *channels, spatial, BN_EPS,
                                )?;
                                outs.push(Tensor::from_vec(&x.shape, y.data)?);
                            }
                            flow = match flow {
                                Flow::Single(_) => Flow::Single(outs.pop().expect("one")),
                                Flow::Paths(_) => Flow::Paths(outs),
                            };
                        }
                    }
                }
                (LayerKind::BitSplit, Flow::Single(x)) => {
                    let codes = quant::split_codes(&x.data, self.k);
                    let mut paths = Vec::with_capacity(self.k);
                    for i_bit in 1..=self.k {
                        let b = act_betas[i_bit - 1];
                        let data: Vec<f32> = codes
                            .iter()
                            .map(|&q| if (q >> (self.k - i_bit)) & 1 == 1 { b } else { 0.0 })
                            .collect();
                        paths.push(Tensor::from_vec(&x.shape, data)?);
                    }
                    if train {
                        caches.push(Cache::Split { x: x.clone() });
                    }
                    flow = Flow::Paths(paths);
                }
                (LayerKind::BinaryAct, Flow::Paths(xs)) => {
                    // train mode only; inference folds this into the preceding BN
                    let mut outs = Vec::with_capacity(xs.len());
                    for (p, x) in xs.iter().enumerate() {
                        let b = act_betas[p];
                        outs.push(x.map(|v| if v >= 0.5 { b } else { 0.0 }));
                    }
                    if train {
                        caches.push(Cache::Act);
                    }
                    flow = Flow::Paths(outs);
                }
                (LayerKind::BitMerge, Flow::Paths(xs)) => {
                    let mut bits = Vec::with_capacity(xs.len());
                    for x in xs.iter() {
                        bits.push(x.map(|v| if v != 0.0 { 1.0 } else { 0.0 }));
                    }
                    let mut merged = vec![0.0f64; xs[0].numel()];
                    for (p, bit) in bits.iter().enumerate() {
                        let b = self.merge_betas[p] as f64;
                        for (m, &v) in merged.iter_mut().zip(&bit.data) {
                            if v != 0.0 {
                                *m += b;
                            }
                        }
                    }
                    let out = Tensor::from_vec(
                        &xs[0].shape,
                        merged.into_iter().map(|v| v as f32).collect(),
                    )?;
                    if train {
                        caches.push(Cache::Merge { bits });
                    }
                    flow = Flow::Single(out);
                }
                (LayerKind::MaxPool { window, stride }, _) => {
                    let xs: Vec<&Tensor> = match &flow {
                        Flow::Single(x) => vec![x],
                        Flow::Paths(xs) => xs.iter().collect(),
                    };
                    if xs[0].shape.len() < 4 {
                        return Err(invalid_arg!("maxpool needs [batch,c,h,w] input"));
                    }
                    let (c, h, w_dim) = (xs[0].shape[1], xs[0].shape[2], xs[0].shape[3]);
                    let mut outs = Vec::with_capacity(xs.len());
                    let mut args = Vec::with_capacity(xs.len());
                    for x in &xs {
                        let (y, arg) = layers::maxpool_forward(x, c, h, w_dim, *window, *stride)?;
                        outs.push(y);
                        args.push(arg);
                    }
                    if train {
                        caches.push(Cache::Pool {
                            argmax: args,
                            in_shape: xs[0].shape.clone(),
                            on_paths: matches!(flow, Flow::Paths(_)),
                        });
                    }
                    flow = match flow {
                        Flow::Single(_) => Flow::Single(outs.pop().expect("one")),
                        Flow::Paths(_) => Flow::Paths(outs),
                    };
                }
                (LayerKind::Relu, Flow::Single(x)) => {
                    let y = layers::relu_forward(x);
                    if train {
                        caches.push(Cache::Relu { x: x.clone() });
                    }
                    flow = Flow::Single(y);
                }
                (LayerKind::SoftmaxXent, Flow::Single(x)) => {
                    logits = Some(x.clone());
                }
                (kind, _) => {
                    return Err(invalid_arg!(
                        "layer {} ({kind:?}) applied to an incompatible flow",
                        spec.name
                    ));
                }
            }
            i += 1;
        }

        let logits = match logits {
            Some(l) => l,
            None => match flow {
                Flow::Single(x) => x,
                Flow::Paths(_) => {
                    return Err(Error::InvalidState("network ended on split paths".into()))
                }
            },
        };
        let tape = if train {
            Some(Tape {
                caches,
                logits: logits.clone(),
            })
        } else {
            None
        };
        Ok((logits, tape, updates))
    }
}

enum FlowGrad {
    Single(Tensor),
    Paths(Vec<Tensor>),
}

impl FlowGrad {
    fn single(self) -> Result<Tensor> {
        match self {
            FlowGrad::Single(t) => Ok(t),
            FlowGrad::Paths(_) => Err(Error::InvalidState("expected single-path gradient".into())),
        }
    }

    fn paths(self) -> Result<Vec<Tensor>> {
        match self {
            FlowGrad::Paths(ts) => Ok(ts),
            FlowGrad::Single(_) => Err(Error::InvalidState("expected per-path gradients".into())),
        }
    }

    fn paths_or_single(&self) -> Vec<&Tensor> {
        match self {
            FlowGrad::Single(t) => vec![t],
            FlowGrad::Paths(ts) => ts.iter().collect(),
        }
    }
}

fn accumulate(grads: &mut BTreeMap<String, Tensor>, name: String, g: Tensor) {
    match grads.get_mut(&name) {
        Some(acc) => {
            for (a, &v) in acc.data.iter_mut().zip(&g.data) {
                *a += v;
            }
        }
        None => {
            grads.insert(name, g);
        }
    }
}

fn reshape_batch(x: &Tensor, batch: usize, per_sample: &[usize]) -> Result<Tensor> {
    let want: usize = per_sample.iter().product::<usize>() * batch;
    if x.numel() != want {
        return Err(invalid_arg!(
            "cannot view {:?} as batch {batch} x {per_sample:?}",
            x.shape
        ));
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(per_sample);
    Tensor::from_vec(&shape, x.data.clone())
}

fn infer_hw(x: &Tensor, batch: usize, c_in: usize) -> Result<(usize, usize)> {
    if x.shape.len() == 4 && x.shape[0] == batch && x.shape[1] == c_in {
        return Ok((x.shape[2], x.shape[3]));
    }
    // accept [batch, c*h*w] for square inputs
    let per = x.numel() / batch / c_in;
    let side = (per as f64).sqrt().round() as usize;
    if side * side == per {
        Ok((side, side))
    } else {
        Err(invalid_arg!("cannot infer conv spatial dims from {:?}", x.shape))
    }
}

fn per_channel_spatial(x: &Tensor, batch: usize, channels: usize) -> Result<usize> {
    let per = x.numel() / batch;
    if !per.is_multiple_of(channels) {
        return Err(invalid_arg!(
            "batch-norm channels {channels} do not divide feature count {per}"
        ));
    }
    Ok(per / channels)
}
