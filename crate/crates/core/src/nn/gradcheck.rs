/// Largest relative discrepancy between `analytic` and a central-difference
/// gradient of `f` at `point`, each coordinate measured as
/// `|a − c| / (|a| + |c| + 1e-12)`.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    assert_eq!(
        point.len(),
        analytic.len(),
        "gradient length must match point"
    );
    let mut x = point.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let x0 = x[i];
        x[i] = x0 + h;
        let fp = f(&x);
        x[i] = x0 - h;
        let fm = f(&x);
        x[i] = x0;
        let central = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        worst = worst.max((a - central).abs() / (a.abs() + central.abs() + 1e-12));
    }
    worst
}

/// Central-difference gradient of `f` at `point`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = x[i];
            x[i] = x0 + h;
            let fp = f(&x);
            x[i] = x0 - h;
            let fm = f(&x);
            x[i] = x0;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn squared_norm_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let d = grad_check(|p| p.iter().map(|v| v * v).sum(), &x, &g, 1e-5);
        assert!(d < 1e-7, "{d}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let d = grad_check(|p| p[0] * p[0], &[1.0], &[3.0], 1e-5);
        assert!(d > 0.1);
    }
}
