//! End-to-end benchmark checks on the 4096-wide MLP: the FP32 baseline's
//! time budget is dominated by the fully connected layers, while the packed
//! breakdown contains no standalone BN entries.

use bitsplit_core::bench::bench_mlp;
use bitsplit_core::data::Dataset;
use bitsplit_core::net::{compile, topology};
use bitsplit_core::tensor::he_init;

#[test]
fn fp32_dense_layers_dominate_wide_mlp() {
    let model = topology::mlp_bnn(2, 1, 3).unwrap();
    let compiled = compile::compile(&model).unwrap();
    let ds = Dataset {
        images: he_init(&[2, 784], 784, 5).unwrap().map(|v| v.abs().min(1.0)),
        labels: vec![0; 2],
        num_classes: 10,
        split: "bench-fixture".into(),
    };
    let rep = bench_mlp(&compiled, &ds, 20, 1).unwrap();

    let dense_fraction: f64 = rep
        .baseline_layers
        .iter()
        .filter(|l| l.layer.starts_with("fc:"))
        .map(|l| l.fraction)
        .sum();
    assert!(
        dense_fraction >= 0.60,
        "fp32 dense layers at {:.1}% of the forward, expected >= 60%",
        dense_fraction * 100.0
    );

    assert!(rep.layers.iter().all(|l| !l.layer.starts_with("bn:")));
    assert!(rep.baseline_layers.iter().any(|l| l.layer.starts_with("bn:")));

    let packed_total: f64 = rep.layers.iter().map(|l| l.fraction).sum();
    assert!((packed_total - 1.0).abs() < 0.01);

    // packed inference of the same network is faster end to end
    let speedup = rep.speedup_vs_f32.unwrap();
    assert!(speedup > 1.0, "packed MLP should beat fp32, got {speedup:.2}x");
    println!(
        "mlp-bnn: fp32 dense fraction {:.1}%, packed speedup {speedup:.2}x",
        dense_fraction * 100.0
    );
}
