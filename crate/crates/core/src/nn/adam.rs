use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bias-corrected Adam over a fixed list of flat parameter buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Applies one update. The whole step is rejected, leaving parameters
    /// and moments untouched, if any gradient entry is non-finite.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        names: &[String],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                self.m.len(),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let label = names
                .get(i)
                .map_or_else(|| format!("param{i}"), Clone::clone);
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{label}: {}", self.m[i].len()),
                    format!("{} / {}", p.len(), g.len()),
                ));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {label}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut st = AdamState::new(&[3], 0.1);
        let mut w = vec![1.0, -2.0, 0.5];
        st.step(&mut [&mut w[..]], &[&[0.0; 3]], &names(1)).unwrap();
        assert_eq!(w, vec![1.0, -2.0, 0.5]);
        assert!(st.first_moments()[0].iter().all(|&m| m == 0.0));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut st = AdamState::new(&[1], 1e-3);
        let mut w = [0.0];
        st.step(&mut [&mut w[..]], &[&[1.0]], &names(1)).unwrap();
        assert!((w[0] + 1e-3).abs() < 1e-9, "{}", w[0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn converges_on_convex_scalar() {
        let mut st = AdamState::new(&[1], 0.05);
        let mut w = [0.0];
        for _ in 0..200 {
            let g = 2.0 * (w[0] - 2.0);
            st.step(&mut [&mut w[..]], &[&[g]], &names(1)).unwrap();
        }
        assert!((w[0] - 2.0).abs() < 0.05, "{}", w[0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut st = AdamState::new(&[1, 2], 0.1);
        let (mut a, mut b) = (vec![1.0], vec![1.0, 1.0]);
        let err = st
            .step(
                &mut [&mut a[..], &mut b[..]],
                &[&[0.1], &[f64::NAN, 0.0]],
                &["enc.w".into(), "dec.w".into()],
            )
            .unwrap_err();
        assert!(err.to_string().contains("dec.w"));
        assert_eq!((a[0], st.step), (1.0, 0));
    }
}
