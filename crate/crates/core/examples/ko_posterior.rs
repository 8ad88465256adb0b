//! Posterior over the Kraichnan–Orszag initial conditions from one observed
//! trajectory: an LVAE compresses the trajectory, a conditional Sinkhorn
//! generator samples the initial conditions.
//!
//! `cargo run --release --example ko_posterior`

use latent_csgan::csgan::{
    posterior_sample, train_csgan, CsganConfig, LatentCodec, LatentPairSet, PosteriorModel,
};
use latent_csgan::kosys::{build_ko_dataset, KoConfig};
use latent_csgan::lvae::{prune, train_lvae, LvConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> latent_csgan::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ds = build_ko_dataset(
        &KoConfig {
            n: 640,
            n_train: 512,
            ..KoConfig::default()
        },
        &mut rng,
    )?;
    let (xi, y1) = ds.train();

    let lv = LvConfig {
        latent_dim: 16,
        hidden: vec![64, 64],
        epochs: 100,
        ramp_epochs: 40,
        lr: 1e-3,
        batch: 64,
        ..LvConfig::default()
    };
    let run = train_lvae(&y1, &lv)?;
    let (pruned, report) = prune(&run.model, &y1, 0.05)?;
    println!(
        "trajectory compressed to {} latent dims",
        report.kept_indices.len()
    );

    let codec = LatentCodec::lvae(pruned, &y1)?;
    let pairs = LatentPairSet::new(xi, codec.encode(&y1)?, ds.train_ids.clone())?;
    let cfg = CsganConfig {
        rho: 0.05,
        epochs: 100,
        batch: 128,
        lr: 3e-4,
        dim_u: Some(2),
        hidden: vec![64, 64],
        ..CsganConfig::default()
    };
    let trained = train_csgan(&pairs, &cfg)?;
    let model = PosteriorModel {
        condition: codec,
        condition_norm: ds.y1_norm.clone(),
        generator: trained.generator,
        data: LatentCodec::Identity { dim: 2 },
        data_norm: ds.xi_norm.clone(),
    };

    let (xi_raw, y_raw) = (ds.xi_raw()?, ds.y1_raw()?);
    for &id in ds.test_ids.iter().take(5) {
        let samples = posterior_sample(y_raw.row(id), 100, &model, &mut rng)?;
        let best = samples
            .rows_iter()
            .map(|r| {
                r.iter()
                    .zip(xi_raw.row(id))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        println!(
            "case {id}: truth ({:+.3}, {:+.3}), closest of 100 samples at distance {best:.4}",
            xi_raw.get(id, 0),
            xi_raw.get(id, 1)
        );
    }
    Ok(())
}
