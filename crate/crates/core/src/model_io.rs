//! Model files: a human-readable JSON manifest followed by a binary blob
//! section (little-endian, 64-bit lengths), versioned with the magic
//! string "BSPN1". Both trainable models and compiled packed models use
//! the same container, discriminated by the manifest's `format` field.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binlinalg::{Encoding, PackedMatrix};
use crate::bitplane::BitPlane;
use crate::error::{Error, Result};
use crate::net::compile::{CompiledModel, CompiledOp};
use crate::net::{Hyper, LayerSpec, Model};
use crate::quant::{CmpDir, ThresholdEntry};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"BSPN1\n";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String, // "model" | "compiled"
    version: u32,
    k: usize,
    n: usize,
    #[serde(default)]
    trainable_beta: bool,
    #[serde(default)]
    merge_betas: Vec<f32>,
    #[serde(default)]
    hyper: Option<Hyper>,
    #[serde(default)]
    specs: Vec<LayerSpec>,
    /// Blob order for trainable models: every param name, then every buffer.
    #[serde(default)]
    params: Vec<String>,
    #[serde(default)]
    buffers: Vec<String>,
    /// Compiled models: op descriptors in execution order.
    #[serde(default)]
    ops: Vec<OpManifest>,
    #[serde(default)]
    num_classes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum OpManifest {
    Linear { name: String, out_dim: usize, in_dim: usize, bias: bool },
    Conv { name: String, c_in: usize, c_out: usize, kh: usize, kw: usize, stride: usize, pad: usize },
    Bn { name: String, channels: usize },
    Split,
    SplitFolded { name: String, boundaries: usize, channels: usize },
    PackedLinear { name: String, out_dim: usize, in_dim: usize, nbits: usize, fused: Vec<f32> },
    PackedConv {
        name: String,
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        nbits: usize,
        fused: Vec<f32>,
    },
    Threshold { name: String, paths: usize, channels: usize },
    OrPool { window: usize, stride: usize },
    Merge { betas: Vec<f32> },
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(t.shape.len() as u64).to_le_bytes())?;
    for &d in &t.shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let ndims = u64::from_le_bytes(b8) as usize;
    if ndims > 8 {
        return Err(Error::Format(format!("implausible tensor rank {ndims}")));
    }
    let mut shape = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b4 = [0u8; 4];
    for _ in 0..n {
        r.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4));
    }
    Tensor::from_vec(&shape, data)
}

fn write_threshold(w: &mut impl Write, e: &ThresholdEntry) -> std::io::Result<()> {
    w.write_all(&e.threshold.to_le_bytes())?;
    w.write_all(&[match e.dir {
        CmpDir::Ge => 0u8,
        CmpDir::Le => 1u8,
    }])?;
    w.write_all(&e.output_beta.to_le_bytes())
}

fn read_threshold(r: &mut impl Read) -> Result<ThresholdEntry> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let threshold = f32::from_le_bytes(b4);
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let dir = match b1[0] {
        0 => CmpDir::Ge,
        1 => CmpDir::Le,
        other => return Err(Error::Format(format!("bad threshold direction tag {other}"))),
    };
    r.read_exact(&mut b4)?;
    Ok(ThresholdEntry {
        threshold,
        dir,
        output_beta: f32::from_le_bytes(b4),
    })
}

fn write_container(path: &Path, manifest: &Manifest, blobs: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let manifest_json = serde_json::to_vec_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    w.write_all(MAGIC)?;
    w.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_json)?;
    w.write_all(blobs)?;
    w.flush()?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Manifest, impl Read)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a BSPN1 model file",
            path.display()
        )));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut manifest_json = vec![0u8; len];
    r.read_exact(&mut manifest_json)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_json)
        .map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
    Ok((manifest, r))
}

/// Save a trainable model (full-precision master weights + BN state).
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let manifest = Manifest {
        format: "model".into(),
        version: 1,
        k: model.k,
        n: model.n,
        trainable_beta: model.trainable_beta,
        merge_betas: model.merge_betas.clone(),
        hyper: Some(model.hyper.clone()),
        specs: model.specs.clone(),
        params: model.params.keys().cloned().collect(),
        buffers: model.buffers.keys().cloned().collect(),
        ops: Vec::new(),
        num_classes: model.num_classes(),
    };
    let mut blobs = Vec::new();
    for t in model.params.values() {
        write_tensor(&mut blobs, t)?;
    }
    for t in model.buffers.values() {
        write_tensor(&mut blobs, t)?;
    }
    write_container(path, &manifest, &blobs)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let (manifest, mut r) = read_container(path)?;
    if manifest.format != "model" {
        return Err(Error::Format(format!(
            "{}: contains a '{}' payload, expected a trainable model",
            path.display(),
            manifest.format
        )));
    }
    let hyper = manifest.hyper.unwrap_or_default();
    let mut model = Model::new(manifest.specs, manifest.k, manifest.n, hyper, 0)?;
    model.merge_betas = manifest.merge_betas;
    if manifest.trainable_beta {
        model.trainable_beta = true;
    }
    let mut params = BTreeMap::new();
    for name in manifest.params {
        params.insert(name, read_tensor(&mut r)?);
    }
    let mut buffers = BTreeMap::new();
    for name in manifest.buffers {
        buffers.insert(name, read_tensor(&mut r)?);
    }
    model.params = params;
    model.buffers = buffers;
    Ok(model)
}

/// Save a compiled model: packed weight planes and threshold tables.
/// Thresholds are stored as per-channel (t, direction, beta) triples.
pub fn save_compiled(c: &CompiledModel, path: &Path) -> Result<()> {
    let mut ops = Vec::new();
    let mut blobs = Vec::new();
    for op in &c.ops {
        match op {
            CompiledOp::Linear { name, w, b } => {
                ops.push(OpManifest::Linear {
                    name: name.clone(),
                    out_dim: w.shape[0],
                    in_dim: w.shape[1],
                    bias: b.is_some(),
                });
                write_tensor(&mut blobs, w)?;
                if let Some(b) = b {
                    write_tensor(&mut blobs, b)?;
                }
            }
            CompiledOp::Conv { name, w_flat, c_in, c_out, kh, kw, stride, pad } => {
                ops.push(OpManifest::Conv {
                    name: name.clone(),
                    c_in: *c_in,
                    c_out: *c_out,
                    kh: *kh,
                    kw: *kw,
                    stride: *stride,
                    pad: *pad,
                });
                write_tensor(&mut blobs, w_flat)?;
            }
            CompiledOp::BnApply { name, gamma, shift, mean, var } => {
                ops.push(OpManifest::Bn {
                    name: name.clone(),
                    channels: gamma.numel(),
                });
                for t in [gamma, shift, mean, var] {
                    write_tensor(&mut blobs, t)?;
                }
            }
            CompiledOp::Split => ops.push(OpManifest::Split),
            CompiledOp::SplitFolded { name, entries } => {
                ops.push(OpManifest::SplitFolded {
                    name: name.clone(),
                    boundaries: entries.len(),
                    channels: entries[0].len(),
                });
                for row in entries {
                    for e in row {
                        write_threshold(&mut blobs, e)?;
                    }
                }
            }
            CompiledOp::PackedLinear { name, mats, nbits, fused, out_dim } => {
                ops.push(OpManifest::PackedLinear {
                    name: name.clone(),
                    out_dim: *out_dim,
                    in_dim: mats[0].cols,
                    nbits: *nbits,
                    fused: fused.clone(),
                });
                for m in mats {
                    for plane in &m.planes {
                        plane.write_to(&mut blobs)?;
                    }
                }
            }
            CompiledOp::PackedConv { name, mats, nbits, fused, c_in, c_out, kh, kw, stride, pad } => {
                ops.push(OpManifest::PackedConv {
                    name: name.clone(),
                    c_in: *c_in,
                    c_out: *c_out,
                    kh: *kh,
                    kw: *kw,
                    stride: *stride,
                    pad: *pad,
                    nbits: *nbits,
                    fused: fused.clone(),
                });
                for m in mats {
                    for plane in &m.planes {
                        plane.write_to(&mut blobs)?;
                    }
                }
            }
            CompiledOp::Threshold { name, entries } => {
                ops.push(OpManifest::Threshold {
                    name: name.clone(),
                    paths: entries.len(),
                    channels: entries[0].len(),
                });
                for row in entries {
                    for e in row {
                        write_threshold(&mut blobs, e)?;
                    }
                }
            }
            CompiledOp::OrPool { window, stride } => {
                ops.push(OpManifest::OrPool {
                    window: *window,
                    stride: *stride,
                });
            }
            CompiledOp::Merge { betas } => {
                ops.push(OpManifest::Merge { betas: betas.clone() });
            }
        }
    }
    let manifest = Manifest {
        format: "compiled".into(),
        version: 1,
        k: c.k,
        n: c.n,
        trainable_beta: false,
        merge_betas: Vec::new(),
        hyper: None,
        specs: Vec::new(),
        params: Vec::new(),
        buffers: Vec::new(),
        ops,
        num_classes: c.num_classes,
    };
    write_container(path, &manifest, &blobs)
}

pub fn load_compiled(path: &Path) -> Result<CompiledModel> {
    let (manifest, mut r) = read_container(path)?;
    if manifest.format != "compiled" {
        return Err(Error::Format(format!(
            "{}: contains a '{}' payload, expected a compiled model",
            path.display(),
            manifest.format
        )));
    }
    let mut ops = Vec::new();
    for op in manifest.ops {
        match op {
            OpManifest::Linear { name, out_dim, in_dim, bias } => {
                let w = read_tensor(&mut r)?;
                if w.shape != vec![out_dim, in_dim] {
                    return Err(Error::Format("linear blob shape mismatch".into()));
                }
                let b = if bias { Some(read_tensor(&mut r)?) } else { None };
                ops.push(CompiledOp::Linear { name, w, b });
            }
            OpManifest::Conv { name, c_in, c_out, kh, kw, stride, pad } => {
                let w_flat = read_tensor(&mut r)?;
                ops.push(CompiledOp::Conv { name, w_flat, c_in, c_out, kh, kw, stride, pad });
            }
            OpManifest::Bn { name, channels } => {
                let gamma = read_tensor(&mut r)?;
                let shift = read_tensor(&mut r)?;
                let mean = read_tensor(&mut r)?;
                let var = read_tensor(&mut r)?;
                if gamma.numel() != channels {
                    return Err(Error::Format("bn blob shape mismatch".into()));
                }
                ops.push(CompiledOp::BnApply { name, gamma, shift, mean, var });
            }
            OpManifest::Split => ops.push(CompiledOp::Split),
            OpManifest::SplitFolded { name, boundaries, channels } => {
                let mut entries = Vec::with_capacity(boundaries);
                for _ in 0..boundaries {
                    let mut row = Vec::with_capacity(channels);
                    for _ in 0..channels {
                        row.push(read_threshold(&mut r)?);
                    }
                    entries.push(row);
                }
                ops.push(CompiledOp::SplitFolded { name, entries });
            }
            OpManifest::PackedLinear { name, out_dim, in_dim, nbits, fused } => {
                let mut mats = Vec::with_capacity(nbits);
                for _ in 0..nbits {
                    let mut planes = Vec::with_capacity(out_dim);
                    for _ in 0..out_dim {
                        planes.push(BitPlane::read_from(&mut r)?);
                    }
                    mats.push(PackedMatrix::new(out_dim, in_dim, planes, Encoding::PlusMinusOne)?);
                }
                ops.push(CompiledOp::PackedLinear { name, mats, nbits, fused, out_dim });
            }
            OpManifest::PackedConv { name, c_in, c_out, kh, kw, stride, pad, nbits, fused } => {
                let cols = c_in * kh * kw;
                let mut mats = Vec::with_capacity(nbits);
                for _ in 0..nbits {
                    let mut planes = Vec::with_capacity(c_out);
                    for _ in 0..c_out {
                        planes.push(BitPlane::read_from(&mut r)?);
                    }
                    mats.push(PackedMatrix::new(c_out, cols, planes, Encoding::PlusMinusOne)?);
                }
                ops.push(CompiledOp::PackedConv { name, mats, nbits, fused, c_in, c_out, kh, kw, stride, pad });
            }
            OpManifest::Threshold { name, paths, channels } => {
                let mut entries = Vec::with_capacity(paths);
                for _ in 0..paths {
                    let mut row = Vec::with_capacity(channels);
                    for _ in 0..channels {
                        row.push(read_threshold(&mut r)?);
                    }
                    entries.push(row);
                }
                ops.push(CompiledOp::Threshold { name, entries });
            }
            OpManifest::OrPool { window, stride } => {
                ops.push(CompiledOp::OrPool { window, stride });
            }
            OpManifest::Merge { betas } => ops.push(CompiledOp::Merge { betas }),
        }
    }
    Ok(CompiledModel {
        k: manifest.k,
        n: manifest.n,
        ops,
        num_classes: manifest.num_classes,
    })
}

pub enum ModelFile {
    Trainable(Box<Model>),
    Compiled(CompiledModel),
}

/// Load either container format.
pub fn load_any(path: &Path) -> Result<ModelFile> {
    let (manifest, _) = read_container(path)?;
    match manifest.format.as_str() {
        "model" => Ok(ModelFile::Trainable(Box::new(load_model(path)?))),
        "compiled" => Ok(ModelFile::Compiled(load_compiled(path)?)),
        other => Err(Error::Format(format!("unknown payload format '{other}'"))),
    }
}

/// Pretty manifest text for `inspect`.
pub fn inspect(path: &Path) -> Result<String> {
    let (manifest, _) = read_container(path)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest re-encode: {e}")))?;
    Ok(json)
}
