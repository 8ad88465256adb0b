//! Nearest-neighbor differential entropy (Kozachenko–Leonenko, max-norm).

use std::fmt::Write as _;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropySpec {
    pub k: usize,
}

impl Default for EntropySpec {
    fn default() -> Self {
        Self { k: 5 }
    }
}

/// Relative size of the perturbation applied when samples coincide.
pub const JITTER: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    /// Nats.
    pub value: f64,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    /// Absolute jitter amplitude, 0 when none was needed.
    pub jitter: f64,
}

/// `ψ(N) − ψ(k) + (d/N) Σᵢ log(2 rᵢ)` with `rᵢ` the Chebyshev distance to
/// the k-th neighbor.
pub fn ksg_entropy(samples: &Tensor, spec: &EntropySpec) -> Result<f64> {
    Ok(ksg_estimate(samples, spec)?.value)
}

pub fn ksg_estimate(samples: &Tensor, spec: &EntropySpec) -> Result<EntropyEstimate> {
    let (n, d) = (samples.rows(), samples.cols());
    if spec.k == 0 || n <= spec.k {
        return Err(Error::InvalidArgument(format!(
            "need 1 ≤ k < N, got k={} N={n}",
            spec.k
        )));
    }
    if d == 0 {
        return Err(Error::InvalidArgument(
            "samples have zero dimensions".into(),
        ));
    }
    samples.ensure_finite("entropy samples")?;

    let mut radii = kth_neighbor_distances(samples, spec.k);
    let mut jitter = 0.0;
    if radii.contains(&0.0) {
        let scale = samples.max_abs().max(f64::MIN_POSITIVE);
        jitter = JITTER * scale;
        warn!("coincident samples: jittering by {jitter:e} before the entropy estimate");
        let mut rng = ChaCha8Rng::seed_from_u64(0x006b_7367);
        let mut moved = samples.clone();
        moved
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += jitter * rng.random_range(-1.0..1.0));
        radii = kth_neighbor_distances(&moved, spec.k);
        if radii.contains(&0.0) {
            return Err(Error::InvalidArgument(
                "samples still coincide after jitter".into(),
            ));
        }
    }
    let log_sum: f64 = radii.iter().map(|r| (2.0 * r).ln()).sum();
    let value = digamma(n as f64) - digamma(spec.k as f64) + d as f64 * log_sum / n as f64;
    Ok(EntropyEstimate {
        value,
        n,
        d,
        k: spec.k,
        jitter,
    })
}

/// Exact brute-force k-th neighbor distances under the max-norm.
fn kth_neighbor_distances(x: &Tensor, k: usize) -> Vec<f64> {
    let n = x.rows();
    let mut best = vec![f64::INFINITY; k];
    (0..n)
        .map(|i| {
            best.iter_mut().for_each(|b| *b = f64::INFINITY);
            let xi = x.row(i);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let worst = best[k - 1];
                let mut dist = 0.0_f64;
                for (a, b) in xi.iter().zip(x.row(j)) {
                    dist = dist.max((a - b).abs());
                    if dist >= worst {
                        break;
                    }
                }
                if dist < worst {
                    // insertion into the sorted k-best list
                    let mut pos = k - 1;
                    while pos > 0 && best[pos - 1] > dist {
                        best[pos] = best[pos - 1];
                        pos -= 1;
                    }
                    best[pos] = dist;
                }
            }
            best[k - 1]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntropy {
    pub case: usize,
    pub m: usize,
    pub d: usize,
    pub k: usize,
    pub entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot summarize an empty list".into(),
            ));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile(&v, 0.5),
            q25: quantile(&v, 0.25),
            q75: quantile(&v, 0.75),
            min: v[0],
            max: v[v.len() - 1],
        })
    }
}

/// Linear-interpolated quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub cases: Vec<CaseEntropy>,
    pub summary: Summary,
}

impl EntropyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,m,d,k,entropy\n");
        for c in &self.cases {
            let _ = writeln!(s, "{},{},{},{},{}", c.case, c.m, c.d, c.k, c.entropy);
        }
        s
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.cases.iter().map(|c| c.entropy).collect()
    }
}

/// Entropy of each case's sample set plus summary statistics.
pub fn entropy_report(cases: &[Tensor], spec: &EntropySpec) -> Result<EntropyReport> {
    let cases = cases
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let e = ksg_estimate(x, spec)?;
            Ok(CaseEntropy {
                case: i,
                m: e.n,
                d: e.d,
                k: e.k,
                entropy: e.value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = Summary::of(&cases.iter().map(|c| c.entropy).collect::<Vec<_>>())?;
    Ok(EntropyReport { cases, summary })
}
