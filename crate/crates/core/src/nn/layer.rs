use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Slope used by every LeakyReLU in the model zoo.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu { slope: LEAKY_SLOPE }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    /// Global Lipschitz constant of the scalar nonlinearity.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => slope.abs().max(1.0),
            Activation::Sigmoid => 0.25,
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine map followed by a pointwise activation, optionally spectral-normalized.
///
/// With `spectral_norm` set, forward passes use `weight / σ̂` where
/// `σ̂ = ‖weight · v‖` and `v` is the cached power-iteration vector. The
/// vector only changes through [`DenseLayer::spectral_normalize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub spectral_norm: bool,
    pub power_vector: Vec<f64>,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        spectral_norm: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weight: Vec<f64> = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let mut v: Vec<f64> = (0..inputs).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize(&mut v);
        Self {
            weight: Tensor::matrix(outputs, inputs, weight).expect("consistent shape"),
            bias,
            activation,
            spectral_norm,
            power_vector: v,
        }
    }

    /// Layer with explicit parameters; used by tests and checkpoint loading.
    pub fn from_parts(
        weight: Tensor,
        bias: Vec<f64>,
        activation: Activation,
        spectral_norm: bool,
    ) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::shape(
                "DenseLayer",
                "matrix weight",
                format!("{:?}", weight.shape()),
            ));
        }
        if bias.len() != weight.rows() {
            return Err(Error::shape("DenseLayer bias", weight.rows(), bias.len()));
        }
        let mut v = vec![1.0; weight.cols()];
        normalize(&mut v);
        Ok(Self {
            weight,
            bias,
            activation,
            spectral_norm,
            power_vector: v,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    /// `‖W v‖` for the cached vector `v`.
    pub fn sigma_estimate(&self) -> f64 {
        let wv = self.mul_vec(&self.power_vector);
        norm(&wv)
    }

    /// Runs `n_iters` power iterations on `WᵀW`, updating the cached vector,
    /// and returns the new estimate `σ̂ = ‖W v‖`. A zero matrix yields 0 and
    /// leaves the vector untouched.
    pub fn spectral_normalize(&mut self, n_iters: usize) -> f64 {
        for _ in 0..n_iters.max(1) {
            let mut u = self.mul_vec(&self.power_vector);
            if normalize(&mut u) == 0.0 {
                return 0.0;
            }
            let mut v = self.mul_t_vec(&u);
            if normalize(&mut v) == 0.0 {
                return 0.0;
            }
            self.power_vector = v;
        }
        self.sigma_estimate()
    }

    /// Divisor applied to the weight in forward passes.
    pub fn weight_divisor(&self) -> f64 {
        if !self.spectral_norm {
            return 1.0;
        }
        let s = self.sigma_estimate();
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn effective_weight(&self) -> Tensor {
        self.weight.scale(1.0 / self.weight_divisor())
    }

    fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.weight
            .rows_iter()
            .map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn mul_t_vec(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs()];
        for (r, &ui) in self.weight.rows_iter().zip(u) {
            for (o, w) in out.iter_mut().zip(r) {
                *o += ui * w;
            }
        }
        out
    }

    /// Returns `(pre_activation, output)` for a batch `N×in`.
    pub(crate) fn forward(&self, x: &Tensor, divisor: f64) -> (Tensor, Tensor) {
        let (n, fan_in, fan_out) = (x.rows(), self.inputs(), self.outputs());
        let mut pre = vec![0.0; n * fan_out];
        for row in pre.chunks_mut(fan_out) {
            row.copy_from_slice(&self.bias);
        }
        gemm(
            n,
            fan_in,
            fan_out,
            1.0 / divisor,
            x.data(),
            false,
            self.weight.data(),
            true,
            1.0,
            &mut pre,
        );
        let act = self.activation;
        let out: Vec<f64> = pre.iter().map(|&p| act.apply(p)).collect();
        (
            Tensor::matrix(n, fan_out, pre).expect("shape"),
            Tensor::matrix(n, fan_out, out).expect("shape"),
        )
    }

    /// Back-propagates `d_out` through one layer given its cached values.
    pub(crate) fn backward(
        &self,
        x: &Tensor,
        pre: &Tensor,
        out: &Tensor,
        divisor: f64,
        d_out: &Tensor,
    ) -> (LayerGrads, Tensor) {
        let (n, fan_in, fan_out) = (x.rows(), self.inputs(), self.outputs());
        let act = self.activation;
        let d_pre: Vec<f64> = d_out
            .data()
            .iter()
            .zip(pre.data().iter().zip(out.data()))
            .map(|(&g, (&p, &y))| g * act.derivative(p, y))
            .collect();

        let mut bias = vec![0.0; fan_out];
        for row in d_pre.chunks(fan_out) {
            for (b, g) in bias.iter_mut().zip(row) {
                *b += g;
            }
        }

        // gradient w.r.t. the effective weight W/σ
        let mut d_eff = vec![0.0; fan_out * fan_in];
        gemm(
            fan_out,
            n,
            fan_in,
            1.0,
            &d_pre,
            true,
            x.data(),
            false,
            0.0,
            &mut d_eff,
        );

        let mut d_x = vec![0.0; n * fan_in];
        gemm(
            n,
            fan_out,
            fan_in,
            1.0 / divisor,
            &d_pre,
            false,
            self.weight.data(),
            false,
            0.0,
            &mut d_x,
        );

        let wv = self.mul_vec(&self.power_vector);
        let weight = if self.spectral_norm && norm(&wv) > 0.0 {
            // W_eff = W/σ(W), σ = ‖W v‖, ∂σ/∂W = u vᵀ with u = W v / σ
            let sigma = divisor;
            let u: Vec<f64> = wv.iter().map(|x| x / sigma).collect();
            let inner: f64 = d_eff
                .iter()
                .zip(self.weight.data())
                .map(|(a, b)| a * b)
                .sum();
            let coef = inner / (sigma * sigma);
            let v = &self.power_vector;
            let mut g = d_eff;
            for i in 0..fan_out {
                for j in 0..fan_in {
                    g[i * fan_in + j] = g[i * fan_in + j] / sigma - coef * u[i] * v[j];
                }
            }
            g
        } else {
            d_eff
        };

        (
            LayerGrads { weight, bias },
            Tensor::matrix(n, fan_in, d_x).expect("shape"),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}
