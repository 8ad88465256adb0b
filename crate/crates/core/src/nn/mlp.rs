use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Activation, DenseLayer, LayerGrads};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feed-forward stack of dense layers behind a constant input scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub input_scale: f64,
}

/// Intermediates recorded by [`Mlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    outputs: Vec<Tensor>,
    divisors: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().expect("non-empty network")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn scale(&mut self, a: f64) {
        for l in &mut self.layers {
            l.weight
                .iter_mut()
                .chain(l.bias.iter_mut())
                .for_each(|x| *x *= a);
        }
    }
}

/// Layer description used by [`Mlp::build`].
#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub outputs: usize,
    pub activation: Activation,
    pub spectral_norm: bool,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>, input_scale: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "network needs at least one layer".into(),
            ));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::shape(
                    "Mlp::new",
                    format!("layer {} input {}", i + 1, w[0].outputs()),
                    w[1].inputs(),
                ));
            }
        }
        if !(input_scale.is_finite() && input_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "input_scale must be positive, got {input_scale}"
            )));
        }
        Ok(Self {
            layers,
            input_scale,
        })
    }

    pub fn build<R: Rng + ?Sized>(
        inputs: usize,
        specs: &[LayerSpec],
        input_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut fan_in = inputs;
        let mut layers = Vec::with_capacity(specs.len());
        for s in specs {
            layers.push(DenseLayer::new(
                fan_in,
                s.outputs,
                s.activation,
                s.spectral_norm,
                rng,
            ));
            fan_in = s.outputs;
        }
        Self::new(layers, input_scale)
    }

    /// Hidden LeakyReLU layers followed by an output layer with `head`.
    pub fn stack<R: Rng + ?Sized>(
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        head: Activation,
        spectral_norm: bool,
        input_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut specs: Vec<LayerSpec> = hidden
            .iter()
            .map(|&h| LayerSpec {
                outputs: h,
                activation: Activation::leaky(),
                spectral_norm,
            })
            .collect();
        specs.push(LayerSpec {
            outputs,
            activation: head,
            spectral_norm,
        });
        Self::build(inputs, &specs, input_scale, rng)
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::outputs)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.inputs() {
            return Err(Error::shape(
                "mlp_forward",
                format!("[N×{}]", self.inputs()),
                format!("{:?}", batch.shape()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self
            .forward_cached(batch)?
            .outputs
            .pop()
            .expect("non-empty"))
    }

    pub fn forward_cached(&self, batch: &Tensor) -> Result<ForwardCache> {
        self.check_batch(batch)?;
        let n = self.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
            divisors: Vec::with_capacity(n),
        };
        let mut x = if self.input_scale == 1.0 {
            batch.clone()
        } else {
            batch.scale(self.input_scale)
        };
        for layer in &self.layers {
            let d = layer.weight_divisor();
            let (pre, out) = layer.forward(&x, d);
            cache.inputs.push(x);
            cache.pre.push(pre);
            cache.divisors.push(d);
            x = out.clone();
            cache.outputs.push(out);
        }
        Ok(cache)
    }

    /// Reverse-mode pass: gradients of `⟨upstream, forward(batch)⟩` with
    /// respect to every parameter and to the input batch.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Tensor) -> Result<(MlpGrads, Tensor)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "forward cache has {} layers, network has {}",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        let out = cache.output();
        if upstream.shape() != out.shape() {
            return Err(Error::shape(
                "mlp_backward",
                format!("{:?}", out.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (lg, dx) = layer.backward(
                &cache.inputs[i],
                &cache.pre[i],
                &cache.outputs[i],
                cache.divisors[i],
                &g,
            );
            grads.push(lg);
            g = dx;
        }
        grads.reverse();
        if self.input_scale != 1.0 {
            g = g.scale(self.input_scale);
        }
        Ok((MlpGrads { layers: grads }, g))
    }

    /// One power-iteration update on every spectral-normalized layer.
    pub fn power_iterate(&mut self, n_iters: usize) {
        for l in self.layers.iter_mut().filter(|l| l.spectral_norm) {
            l.spectral_normalize(n_iters);
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| {
                [
                    format!("{prefix}layer{i}.weight"),
                    format!("{prefix}layer{i}.bias"),
                ]
            })
            .collect()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.len()).collect()
    }

    /// `input_scale · Π ‖W_eff‖₂`: the bound of the linear parts alone.
    pub fn linear_lipschitz_bound(&self) -> f64 {
        self.layers.iter().fold(self.input_scale, |acc, l| {
            acc * spectral_norm_exact(&l.effective_weight())
        })
    }

    /// Product bound including each activation's Lipschitz constant.
    pub fn lipschitz_bound(&self) -> f64 {
        self.layers.iter().fold(self.input_scale, |acc, l| {
            acc * spectral_norm_exact(&l.effective_weight()) * l.activation.lipschitz()
        })
    }
}

/// Largest singular value from a full SVD.
pub fn spectral_norm_exact(w: &Tensor) -> f64 {
    let m = DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
    m.singular_values().iter().fold(0.0_f64, |a, &b| a.max(b))
}
