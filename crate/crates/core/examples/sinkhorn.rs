//! Debiased Sinkhorn divergence between two point clouds, compared with the
//! exact assignment cost, plus one gradient step on the second cloud.
//!
//! `cargo run --release --example sinkhorn`

use latent_csgan::ot::{
    exact_ot_assignment, ot_rho, sinkhorn_divergence, sinkhorn_grad, uniform_weights,
    SinkhornConfig,
};
use latent_csgan::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> latent_csgan::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 6;
    let x = Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.random::<f64>()).collect())?;
    let mut y = Tensor::matrix(
        n,
        2,
        (0..2 * n).map(|_| rng.random::<f64>() + 0.5).collect(),
    )?;
    let w = uniform_weights(n);

    let exact = exact_ot_assignment(&x, &y, Default::default())?;
    println!("exact assignment cost: {exact:.6}");
    for rho in [1.0, 0.1, 0.01, 0.001] {
        let ot = ot_rho(&x, &y, &w, &w, &SinkhornConfig::with_rho(rho))?;
        println!(
            "rho {rho:<6} entropic cost {:.6} ({} iterations)",
            ot.value, ot.iterations
        );
    }

    let cfg = SinkhornConfig::with_rho(0.05);
    for step in 0..5 {
        let (grad, div) = sinkhorn_grad(&x, &y, &w, &w, &cfg)?;
        println!("step {step}: S(x, y) = {:.6}", div.value);
        y = y.sub(&grad.scale(n as f64 * 0.5))?;
    }
    let self_div = sinkhorn_divergence(&x, &x, &w, &w, &cfg)?.value;
    println!("S(x, x) = {self_div:.2e}");
    Ok(())
}
