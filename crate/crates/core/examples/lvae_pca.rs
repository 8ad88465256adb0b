//! A linear least-volume autoencoder recovers the principal subspace of data
//! lying on a 5-dimensional plane in 20 dimensions.
//!
//! `cargo run --release --example lvae_pca`

use latent_csgan::lvae::{pca_fit, principal_angles, prune, train_lvae, LvConfig};
use latent_csgan::nn::Activation;
use latent_csgan::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> latent_csgan::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mixing: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = 2000;
    let mut data = Vec::with_capacity(n * 20);
    for _ in 0..n {
        let s: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
        data.extend((0..20).map(|d| 0.1 * (0..5).map(|k| mixing[d * 5 + k] * s[k]).sum::<f64>()));
    }
    let x = Tensor::matrix(n, 20, data)?;

    let cfg = LvConfig {
        latent_dim: 8,
        hidden: vec![],
        hidden_activation: Activation::Identity,
        output_activation: Activation::Identity,
        eta: 0.01,
        lambda_final: 0.3,
        epochs: 300,
        ramp_epochs: 100,
        batch: 100,
        lr: 3e-3,
        seed: 1,
        ..LvConfig::default()
    };
    let run = train_lvae(&x, &cfg)?;
    let mut stds = run.model.latent_stds.clone();
    stds.sort_by(|a, b| b.total_cmp(a));
    println!("latent standard deviations: {stds:.4?}");

    let (pruned, report) = prune(&run.model, &x, 0.05)?;
    println!(
        "kept {} of 8 dimensions; mean error {:.4} -> {:.4}",
        report.kept_indices.len(),
        report.baseline_error,
        report.pruned_error
    );
    let pca = pca_fit(&x, 5)?;
    let angles = principal_angles(&pruned.latent_directions()?, &pca.components)?;
    let deg: Vec<f64> = angles.iter().map(|a| a.to_degrees()).collect();
    println!("principal angles to the PCA subspace (deg): {deg:.3?}");
    Ok(())
}
