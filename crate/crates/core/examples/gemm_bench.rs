use bitsplit_core::tensor::{gemm, gemm_bt};
use std::time::Instant;
fn main() {
    let m = 6400; let k = 500; let n = 50;
    let a = vec![0.5f32; m*k]; let b = vec![0.25f32; n*k];
    let mut c = vec![0.0f32; m*n];
    // warmup
    gemm_bt(&a, &b, &mut c, m, k, n);
    let t0 = Instant::now();
    for _ in 0..10 { gemm_bt(&a, &b, &mut c, m, k, n); }
    let el = t0.elapsed().as_secs_f64();
    println!("gemm_bt {}x{}x{}: {:.1} GF/s", m, k, n, 10.0*2.0*(m*k*n) as f64/el/1e9);
    let b2 = vec![0.25f32; k*n];
    let t0 = Instant::now();
    for _ in 0..10 { gemm(&a, &b2, &mut c, m, k, n); }
    let el = t0.elapsed().as_secs_f64();
    println!("gemm    {}x{}x{}: {:.1} GF/s", m, k, n, 10.0*2.0*(m*k*n) as f64/el/1e9);
}
