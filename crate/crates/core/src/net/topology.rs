//! Pre-configured network topologies. First and last layers stay full
//! precision; everything between the splitting and merging layers runs on
//! binary planes with quantized weights.

use crate::error::{invalid_arg, Result};

use super::{Hyper, LayerKind, LayerSpec, Model};

/// LeNet-5 for 28x28 inputs:
/// conv 20@5x5 (fp) - BN - split - pool2 |
/// conv 50@5x5 (q) - BN - act - pool2 | fc 800-500 (q) - BN - act |
/// merge | fc 500-10 (fp, bias) - softmax.
pub fn lenet5(k: usize, n: usize, seed: u64) -> Result<Model> {
    let specs = vec![
        LayerSpec::new(
            "conv1",
            LayerKind::Conv2d { c_in: 1, c_out: 20, kh: 5, kw: 5, stride: 1, pad: 0 },
            false,
        ),
        LayerSpec::new("bn1", LayerKind::BatchNorm { channels: 20 }, false),
        LayerSpec::new("split", LayerKind::BitSplit, false),
        LayerSpec::new("pool1", LayerKind::MaxPool { window: 2, stride: 2 }, false),
        LayerSpec::new(
            "conv2",
            LayerKind::Conv2d { c_in: 20, c_out: 50, kh: 5, kw: 5, stride: 1, pad: 0 },
            true,
        ),
        LayerSpec::new("bn2", LayerKind::BatchNorm { channels: 50 }, false),
        LayerSpec::new("act2", LayerKind::BinaryAct, false),
        LayerSpec::new("pool2", LayerKind::MaxPool { window: 2, stride: 2 }, false),
        LayerSpec::new("fc1", LayerKind::Dense { in_dim: 800, out_dim: 500, bias: false }, true),
        LayerSpec::new("bn3", LayerKind::BatchNorm { channels: 500 }, false),
        LayerSpec::new("act3", LayerKind::BinaryAct, false),
        LayerSpec::new("merge", LayerKind::BitMerge, false),
        LayerSpec::new("fc2", LayerKind::Dense { in_dim: 500, out_dim: 10, bias: true }, false),
        LayerSpec::new("loss", LayerKind::SoftmaxXent, false),
    ];
    Model::new(specs, k, n, Hyper::default(), seed)
}

/// Fully connected BitSplit net over the given layer widths. The first and
/// last weight layers are full precision; interior layers are quantized with
/// a BN + binary activation after each.
pub fn mlp(dims: &[usize], k: usize, n: usize, seed: u64) -> Result<Model> {
    if dims.len() < 4 {
        return Err(invalid_arg!(
            "mlp needs at least [in, hidden, hidden, out] widths, got {dims:?}"
        ));
    }
    let mut specs = Vec::new();
    specs.push(LayerSpec::new(
        "fc1",
        LayerKind::Dense { in_dim: dims[0], out_dim: dims[1], bias: false },
        false,
    ));
    specs.push(LayerSpec::new("bn1", LayerKind::BatchNorm { channels: dims[1] }, false));
    specs.push(LayerSpec::new("split", LayerKind::BitSplit, false));
    for i in 1..dims.len() - 2 {
        let name = format!("fc{}", i + 1);
        specs.push(LayerSpec::new(
            &name,
            LayerKind::Dense { in_dim: dims[i], out_dim: dims[i + 1], bias: false },
            true,
        ));
        specs.push(LayerSpec::new(
            &format!("bn{}", i + 1),
            LayerKind::BatchNorm { channels: dims[i + 1] },
            false,
        ));
        specs.push(LayerSpec::new(&format!("act{}", i + 1), LayerKind::BinaryAct, false));
    }
    specs.push(LayerSpec::new("merge", LayerKind::BitMerge, false));
    let last = dims.len() - 1;
    specs.push(LayerSpec::new(
        &format!("fc{last}"),
        LayerKind::Dense { in_dim: dims[last - 1], out_dim: dims[last], bias: true },
        false,
    ));
    specs.push(LayerSpec::new("loss", LayerKind::SoftmaxXent, false));
    Model::new(specs, k, n, Hyper::default(), seed)
}

/// Desk-scale MLP: 784-512-512-10.
pub fn mlp_desk(k: usize, n: usize, seed: u64) -> Result<Model> {
    mlp(&[784, 512, 512, 10], k, n, seed)
}

/// The MNIST benchmark MLP: 784-4096-4096-4096-10.
pub fn mlp_bnn(k: usize, n: usize, seed: u64) -> Result<Model> {
    mlp(&[784, 4096, 4096, 4096, 10], k, n, seed)
}

/// Build a topology by CLI name.
pub fn by_name(name: &str, k: usize, n: usize, seed: u64) -> Result<Model> {
    match name {
        "lenet5" => lenet5(k, n, seed),
        "mlp" => mlp_desk(k, n, seed),
        "mlp-bnn" => mlp_bnn(k, n, seed),
        other => Err(invalid_arg!(
            "unknown topology '{other}' (expected lenet5, mlp, or mlp-bnn)"
        )),
    }
}
