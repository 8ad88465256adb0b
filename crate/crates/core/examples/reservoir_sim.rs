//! One waterflood simulation on a random log-permeability field, with the
//! conservation diagnostics and producer oil cuts.
//!
//! `cargo run --release --example reservoir_sim`

use latent_csgan::resim::{
    build_kl_basis, kl_sample, sample_rng, simulate, FluidParams, KlConfig, ReservoirGrid,
    SimConfig, WellSet, IR,
};
use rand_distr::{Distribution, StandardNormal};

fn main() -> latent_csgan::Result<()> {
    let grid = ReservoirGrid::desk();
    let kl = KlConfig::default();
    let basis = build_kl_basis(&grid, &kl)?;
    println!(
        "KL basis: {} modes capture {:.1}% of the variance",
        basis.n_modes(),
        100.0 * basis.eigenvalues.iter().sum::<f64>() / basis.total_variance
    );
    let mut rng = sample_rng(0, 0);
    let xi: Vec<f64> = (0..basis.n_modes())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let g = kl_sample(&basis, &xi)?;

    let wells = WellSet::standard(&grid, IR);
    let out = simulate(
        &g,
        kl.kappa0,
        &grid,
        &FluidParams::default(),
        &wells,
        &SimConfig::default(),
    )?;
    let b = out.balance;
    println!(
        "{} steps ({} rejected); max step residual {:.1e}, injector error {:.1e}",
        b.steps, b.rejected_steps, b.max_step_residual, b.max_injector_error
    );
    println!(
        "water saturation range [{:.3}, {:.3}]",
        b.min_saturation, b.max_saturation
    );
    let last = out.oil_cut.cols() - 1;
    for p in 0..out.oil_cut.rows() {
        println!(
            "producer {p}: oil cut {:.3} at t = {:.1}, {:.3} at t = {:.1}",
            out.oil_cut.get(p, 0),
            out.report_times[0],
            out.oil_cut.get(p, last),
            out.report_times[last]
        );
    }
    Ok(())
}
