//! Dominant eigenvalue of a sample covariance by power iteration.
//!
//! ```text
//! cargo run --release --example power_iteration
//! ```

use fera_sim::linalg::{center_rows, covariance, lambda_max, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> fera_sim::Result<()> {
    let c = Matrix::diag(&[4.0, 1.0, 0.25]);
    let e = lambda_max(&c)?;
    println!("diag(4, 1, 0.25): lambda_max = {:.6} after {} iterations", e.value, e.iterations);

    // 200 samples with one dominant direction along (1, 1, ..., 1) / sqrt(d)
    let (n, d) = (200, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let spike = Normal::new(0.0, 2.0).unwrap();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let s = spike.sample(&mut rng) / (d as f64).sqrt();
        data.extend((0..d).map(|_| s + noise.sample(&mut rng)));
    }
    let x = Matrix::new(n, d, data)?;
    let cov = covariance(&center_rows(&x)?)?;
    let e = lambda_max(&cov)?;
    println!(
        "spiked covariance ({d}x{d}): lambda_max = {:.4}, trace = {:.4}, converged = {}",
        e.value,
        cov.trace(),
        e.converged
    );
    println!("expected about 4 + 0.09 = {:.2}", 4.0 + 0.09);
    Ok(())
}
