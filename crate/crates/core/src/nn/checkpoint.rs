//! Network checkpoints: a JSON manifest plus one raw `f64` file per tensor.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::layer::{Activation, DenseLayer};
use super::mlp::Mlp;
use crate::error::{Error, Result};
use crate::io::{read_f64_le, read_json, write_f64_le, write_json};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub spectral_norm: bool,
    pub weight: String,
    pub bias: String,
    pub power_vector: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetManifest {
    pub input_scale: f64,
    pub step: u64,
    pub layers: Vec<LayerEntry>,
}

/// Writes `<dir>/<name>.json` and the parameter files beside it.
pub fn save_mlp(net: &Mlp, dir: &Path, name: &str, step: u64) -> Result<PathBuf> {
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, l) in net.layers.iter().enumerate() {
        let entry = LayerEntry {
            inputs: l.inputs(),
            outputs: l.outputs(),
            activation: l.activation,
            spectral_norm: l.spectral_norm,
            weight: format!("{name}.layer{i}.weight.f64"),
            bias: format!("{name}.layer{i}.bias.f64"),
            power_vector: format!("{name}.layer{i}.power.f64"),
        };
        write_f64_le(&dir.join(&entry.weight), l.weight.data())?;
        write_f64_le(&dir.join(&entry.bias), &l.bias)?;
        write_f64_le(&dir.join(&entry.power_vector), &l.power_vector)?;
        layers.push(entry);
    }
    let manifest = NetManifest {
        input_scale: net.input_scale,
        step,
        layers,
    };
    let path = dir.join(format!("{name}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Loads a network and its recorded step count.
pub fn load_mlp(manifest_path: &Path) -> Result<(Mlp, u64)> {
    let manifest: NetManifest = read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let bad = |reason: String| Error::Artifact {
        path: manifest_path.to_path_buf(),
        reason,
    };
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, e) in manifest.layers.iter().enumerate() {
        let w = read_f64_le(&dir.join(&e.weight))?;
        let b = read_f64_le(&dir.join(&e.bias))?;
        let v = read_f64_le(&dir.join(&e.power_vector))?;
        if w.len() != e.inputs * e.outputs || b.len() != e.outputs || v.len() != e.inputs {
            return Err(bad(format!(
                "layer {i} files do not match {}×{}",
                e.outputs, e.inputs
            )));
        }
        let mut layer = DenseLayer::from_parts(
            Tensor::matrix(e.outputs, e.inputs, w)?,
            b,
            e.activation,
            e.spectral_norm,
        )?;
        layer.power_vector = v;
        layers.push(layer);
    }
    let net = Mlp::new(layers, manifest.input_scale).map_err(|e| bad(e.to_string()))?;
    Ok((net, manifest.step))
}
