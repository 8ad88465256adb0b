//! k-NN entropy estimates of Gaussians against their closed form.
//!
//! `cargo run --release --example ksg_entropy`

use latent_csgan::ksgent::{ksg_estimate, EntropySpec};
use latent_csgan::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> latent_csgan::Result<()> {
    let spec = EntropySpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for d in [1usize, 2, 4] {
        for sd in [0.1, 1.0] {
            let normal = Normal::new(0.0, sd).unwrap();
            let x = Tensor::matrix(
                5000,
                d,
                (0..5000 * d).map(|_| normal.sample(&mut rng)).collect(),
            )?;
            let est = ksg_estimate(&x, &spec)?;
            let exact =
                0.5 * d as f64 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sd * sd).ln();
            println!(
                "d = {d}, sd = {sd:<4}: estimate {:+.4}, exact {exact:+.4}",
                est.value
            );
        }
    }
    Ok(())
}
