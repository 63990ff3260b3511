//! Dataset ingestion: IDX-format image/label files (the MNIST layout, with
//! transparent gzip), plus deterministic synthetic corpora for tests and
//! desk-scale runs where the real files are not on disk.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_arg, Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labelled sample set. Image values live in [0,1]; labels index classes.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, h, w]` for image data, `[n, d]` for flat feature data.
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature count per sample.
    pub fn sample_dim(&self) -> usize {
        self.images.shape[1..].iter().product()
    }

    /// Per-sample shape (without the leading n).
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape[1..]
    }

    pub fn sample(&self, i: usize) -> (&[f32], u32) {
        let d = self.sample_dim();
        (&self.images.data[i * d..(i + 1) * d], self.labels[i])
    }

    /// Copy a batch of samples (by index) into a `[batch, ...]` tensor.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<u32>) {
        let d = self.sample_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let (x, y) = self.sample(i);
            data.extend_from_slice(x);
            labels.push(y);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor { shape, data }, labels)
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 2];
    let n = f.read(&mut magic)?;
    // re-open rather than seek so the gzip reader sees the whole stream
    let f = File::open(path)?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(GzDecoder::new(BufReader::new(f))))
    } else {
        Ok(Box::new(BufReader::new(f)))
    }
}

fn read_u32_be(r: &mut dyn Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image/label file pair; pixels are scaled by 1/255 into [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut ir = open_maybe_gz(images_path)?;
    let magic = read_u32_be(&mut ir)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            images_path.display()
        )));
    }
    let n = read_u32_be(&mut ir)? as usize;
    let h = read_u32_be(&mut ir)? as usize;
    let w = read_u32_be(&mut ir)? as usize;
    let mut raw = vec![0u8; n * h * w];
    ir.read_exact(&mut raw)?;

    let mut lr = open_maybe_gz(labels_path)?;
    let magic = read_u32_be(&mut lr)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            labels_path.display()
        )));
    }
    let n_labels = read_u32_be(&mut lr)? as usize;
    if n_labels != n {
        return Err(Error::Format(format!(
            "count mismatch: {n} images vs {n_labels} labels"
        )));
    }
    let mut labels_raw = vec![0u8; n_labels];
    lr.read_exact(&mut labels_raw)?;

    let data: Vec<f32> = raw.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<u32> = labels_raw.iter().map(|&b| b as u32).collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m as usize + 1);
    Ok(Dataset {
        images: Tensor::from_vec(&[n, h, w], data)?,
        labels,
        num_classes,
        split: images_path.display().to_string(),
    })
}

/// Write a dataset back out as an IDX pair (optionally gzipped). Pixel
/// values are clamped to [0,1] and scaled to bytes.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path, gzip: bool) -> Result<()> {
    if ds.images.shape.len() != 3 {
        return Err(invalid_arg!("write_idx needs [n,h,w] images"));
    }
    let (n, h, w) = (ds.images.shape[0], ds.images.shape[1], ds.images.shape[2]);

    let mut img_bytes = Vec::with_capacity(16 + n * h * w);
    img_bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for dim in [n, h, w] {
        img_bytes.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    img_bytes.extend(
        ds.images
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );

    let mut lbl_bytes = Vec::with_capacity(8 + n);
    lbl_bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    lbl_bytes.extend(ds.labels.iter().map(|&l| l as u8));

    for (path, bytes) in [(images_path, img_bytes), (labels_path, lbl_bytes)] {
        let f = File::create(path)?;
        if gzip {
            let mut enc = GzEncoder::new(f, flate2::Compression::default());
            enc.write_all(&bytes)?;
            enc.finish()?;
        } else {
            let mut f = f;
            f.write_all(&bytes)?;
        }
    }
    Ok(())
}

/// Linearly separable Gaussian blobs in [0,1]^d, one cluster per class.
/// Deterministic per seed.
pub fn synth_blobs(n: usize, classes: usize, seed: u64) -> Dataset {
    let classes = classes.max(1);
    let d = classes.max(2);
    let sigma = 0.12f32; // centers sit ~7 sigma apart
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.gen_range(0..classes) as u32;
        for j in 0..d {
            let center = if j == c as usize { 0.8 } else { 0.2 };
            let v: f32 = center + sigma * sample_standard_normal(&mut rng);
            data.push(v.clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Dataset {
        images: Tensor::from_vec(&[n, d], data).expect("consistent by construction"),
        labels,
        num_classes: classes,
        split: format!("synth_blobs(seed={seed})"),
    }
}

fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f32 {
    use rand_distr::{Distribution, StandardNormal};
    let v: f64 = StandardNormal.sample(rng);
    v as f32
}

// 5x7 digit glyphs, one row per byte, low 5 bits used.
const DIGIT_GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

/// Procedurally rendered 28x28 digit images: glyphs with random scale,
/// rotation, shear, placement, stroke weight, intensity, speckle, and
/// pixel noise. A deterministic stand-in for handwritten-digit corpora on
/// machines without the real files, deformed enough that accuracy separates
/// model capacities instead of saturating.
pub fn synth_digits(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (28usize, 28usize);
    let (gh, gw) = (7usize, 5usize);
    let mut data = vec![0.0f32; n * h * w];
    let mut labels = Vec::with_capacity(n);

    for s in 0..n {
        let digit = rng.gen_range(0..10u32);
        labels.push(digit);
        let glyph = &DIGIT_GLYPHS[digit as usize];
        let scale: f32 = rng.gen_range(2.2..3.4);
        let angle: f32 = rng.gen_range(-0.22..0.22); // radians, ~±12°
        let shear: f32 = rng.gen_range(-0.18..0.18);
        let (boxh, boxw) = ((gh as f32 * scale) as usize + 2, (gw as f32 * scale) as usize + 2);
        let off_r = rng.gen_range(1..=(h - boxh.min(h - 2)).max(2)) as f32;
        let off_c = rng.gen_range(1..=(w - boxw.min(w - 2)).max(2)) as f32;
        let intensity: f32 = rng.gen_range(0.5..1.0);
        let stroke = rng.gen_range(0.55..0.78) * scale; // inked radius around cell centers
        let noise_sd: f32 = rng.gen_range(0.02..0.10);
        let speckles = rng.gen_range(0..6usize);

        // sample the deformed glyph: map each image pixel back into glyph
        // space (inverse rotate/shear/scale) and test against inked cells
        let (sin, cos) = angle.sin_cos();
        let (cgr, cgc) = (gh as f32 / 2.0, gw as f32 / 2.0);
        let (cir, cic) = (off_r + gh as f32 * scale / 2.0, off_c + gw as f32 * scale / 2.0);
        let img = &mut data[s * h * w..(s + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                let dr = r as f32 + 0.5 - cir;
                let dc = c as f32 + 0.5 - cic;
                let rr = cos * dr + sin * dc;
                let rc = -sin * dr + cos * dc - shear * rr;
                let gr = rr / scale + cgr;
                let gc = rc / scale + cgc;
                if gr < -0.5 || gc < -0.5 || gr >= gh as f32 + 0.5 || gc >= gw as f32 + 0.5 {
                    continue;
                }
                // distance to the nearest inked cell center, in pixels
                let mut inked = false;
                let r0 = (gr - 1.0).max(0.0) as usize;
                let c0 = (gc - 1.0).max(0.0) as usize;
                #[allow(clippy::needless_range_loop)]
                'cells: for cr in r0..(r0 + 3).min(gh) {
                    for cc in c0..(c0 + 3).min(gw) {
                        if (glyph[cr] >> (gw - 1 - cc)) & 1 == 1 {
                            let d2 = (gr - (cr as f32 + 0.5)).powi(2)
                                + (gc - (cc as f32 + 0.5)).powi(2);
                            if d2 * scale * scale <= stroke * stroke {
                                inked = true;
                                break 'cells;
                            }
                        }
                    }
                }
                if inked {
                    img[r * w + c] = intensity;
                }
            }
        }
        for _ in 0..speckles {
            let idx = rng.gen_range(0..h * w);
            img[idx] = rng.gen_range(0.3..0.9);
        }
        for px in img.iter_mut() {
            let noise = noise_sd * sample_standard_normal(&mut rng);
            *px = (*px + noise).clamp(0.0, 1.0);
        }
    }
    Dataset {
        images: Tensor::from_vec(&[n, h, w], data).expect("consistent by construction"),
        labels,
        num_classes: 10,
        split: format!("synth_digits(seed={seed})"),
    }
}

/// Materialize a synthetic digit corpus as MNIST-layout IDX files under
/// `dir` (train-images-idx3-ubyte / train-labels-idx1-ubyte and the t10k
/// pair), unless they already exist.
pub fn ensure_synth_digit_dir(dir: &Path, train_n: usize, test_n: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let files = [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", train_n, seed),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", test_n, seed + 1),
    ];
    for (img_name, lbl_name, count, s) in files {
        let img_path = dir.join(img_name);
        let lbl_path = dir.join(lbl_name);
        if img_path.exists() && lbl_path.exists() {
            continue;
        }
        let ds = synth_digits(count, s);
        write_idx(&ds, &img_path, &lbl_path, false)?;
    }
    Ok(())
}

/// Locate the standard train/test IDX pairs under `dir`, accepting either
/// plain or `.gz` files.
pub fn load_mnist_layout(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    let find = |stem: &str| -> Result<std::path::PathBuf> {
        for ext in ["", ".gz"] {
            let p = dir.join(format!("{stem}{ext}"));
            if p.exists() {
                return Ok(p);
            }
        }
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found under {}", stem, dir.display()),
        )))
    };
    let images = find(&format!("{prefix}-images-idx3-ubyte"))?;
    let labels = find(&format!("{prefix}-labels-idx1-ubyte"))?;
    load_idx(&images, &labels)
}

/// Deterministic per-epoch sample permutation.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}
