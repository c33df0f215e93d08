//! Network checkpoint fragments: a JSON-describable manifest plus one raw
//! little-endian `f64` blob holding every array in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{QflowError, Result};

use super::batchnorm::{BatchNormLayer, BatchNormSettings};
use super::mlp::{Activation, DenseLayer, MlpNetwork};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub batch_norm: Option<BatchNormSettings>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentManifest {
    pub key: String,
    pub file: String,
    pub input_dim: usize,
    pub input_norm: Option<BatchNormSettings>,
    pub layers: Vec<LayerManifest>,
    pub arrays: Vec<ArrayEntry>,
}

fn norm_arrays<'a>(prefix: &str, bn: &'a BatchNormLayer, out: &mut Vec<(String, &'a [f64])>) {
    out.push((format!("{prefix}.gamma"), &bn.gamma));
    out.push((format!("{prefix}.beta"), &bn.beta));
    out.push((format!("{prefix}.running_mean"), &bn.running_mean));
    out.push((format!("{prefix}.running_var"), &bn.running_var));
}

/// Every stored array of a network in the canonical fragment order.
pub fn named_arrays(net: &MlpNetwork) -> Vec<(String, &[f64])> {
    let mut out = Vec::new();
    if let Some(bn) = net.input_norm() {
        norm_arrays("input_norm", bn, &mut out);
    }
    for (i, l) in net.layers().iter().enumerate() {
        out.push((format!("layers.{i}.weight"), l.weight.data()));
        out.push((format!("layers.{i}.bias"), &l.bias));
        if let Some(bn) = &l.norm {
            norm_arrays(&format!("layers.{i}.norm"), bn, &mut out);
        }
    }
    out
}

pub fn manifest_for(key: &str, net: &MlpNetwork) -> FragmentManifest {
    FragmentManifest {
        key: key.to_string(),
        file: format!("{key}.bin"),
        input_dim: net.input_dim(),
        input_norm: net.input_norm().map(|bn| bn.settings()),
        layers: net
            .layers()
            .iter()
            .map(|l| LayerManifest {
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                activation: l.activation,
                batch_norm: l.norm.as_ref().map(|bn| bn.settings()),
            })
            .collect(),
        arrays: named_arrays(net)
            .into_iter()
            .map(|(name, data)| ArrayEntry { name, len: data.len() })
            .collect(),
    }
}

pub fn encode(net: &MlpNetwork) -> Vec<u8> {
    let arrays = named_arrays(net);
    let mut bytes = Vec::with_capacity(arrays.iter().map(|(_, a)| a.len() * 8).sum());
    for (_, data) in arrays {
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

/// Writes `<dir>/<key>.bin` and returns the manifest describing it.
pub fn write_fragment(dir: &Path, key: &str, net: &MlpNetwork) -> Result<FragmentManifest> {
    let manifest = manifest_for(key, net);
    let path = dir.join(&manifest.file);
    fs::write(&path, encode(net)).map_err(|e| QflowError::io(path, e))?;
    Ok(manifest)
}

fn corrupt(key: &str, message: impl Into<String>) -> QflowError {
    QflowError::Checkpoint {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Rebuilds a network from a manifest and its raw blob.
pub fn decode(manifest: &FragmentManifest, bytes: &[u8]) -> Result<MlpNetwork> {
    let key = manifest.key.as_str();
    if manifest.layers.is_empty() {
        return Err(corrupt(key, "manifest declares no layers"));
    }
    let norm_layer = |dim: usize, s: BatchNormSettings| {
        BatchNormLayer::new(dim, s).map_err(|e| corrupt(key, format!("batch-norm settings: {e}")))
    };

    // Build a zeroed network with the declared architecture, then check that the
    // array table agrees with it before reading any values.
    let mut prev = manifest.input_dim;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, lm) in manifest.layers.iter().enumerate() {
        if lm.in_dim != prev {
            return Err(corrupt(key, format!("layer {i} in_dim {} does not chain from {prev}", lm.in_dim)));
        }
        prev = lm.out_dim;
        layers.push(DenseLayer {
            weight: DenseArray::zeros(lm.in_dim, lm.out_dim),
            bias: vec![0.0; lm.out_dim],
            activation: lm.activation,
            norm: lm.batch_norm.map(|s| norm_layer(lm.out_dim, s)).transpose()?,
        });
    }
    let input_norm = manifest
        .input_norm
        .map(|s| norm_layer(manifest.input_dim, s))
        .transpose()?;
    let mut net = MlpNetwork::from_layers(key, input_norm, layers).map_err(|e| corrupt(key, e.to_string()))?;

    if manifest_for(key, &net).arrays != manifest.arrays {
        return Err(corrupt(key, "array table does not match the declared architecture"));
    }
    let total: usize = manifest.arrays.iter().map(|a| a.len).sum();
    if total * 8 != bytes.len() {
        return Err(corrupt(key, format!("expected {} bytes, blob has {}", total * 8, bytes.len())));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut fill = |dst: &mut [f64]| {
        for d in dst.iter_mut() {
            *d = values.next().expect("length checked");
        }
    };
    let read_norm = |bn: &mut BatchNormLayer, fill: &mut dyn FnMut(&mut [f64])| {
        fill(&mut bn.gamma);
        fill(&mut bn.beta);
        fill(&mut bn.running_mean);
        fill(&mut bn.running_var);
    };
    let (input_norm, layers) = net.parts_mut();
    if let Some(bn) = input_norm {
        read_norm(bn, &mut fill);
    }
    for l in layers.iter_mut() {
        fill(l.weight.data_mut());
        fill(&mut l.bias);
        if let Some(bn) = l.norm.as_mut() {
            read_norm(bn, &mut fill);
        }
    }

    if named_arrays(&net).iter().any(|(_, a)| a.iter().any(|v| !v.is_finite())) {
        return Err(corrupt(key, "non-finite parameter value"));
    }
    if net.norms().any(|bn| bn.running_var.iter().any(|v| *v < 0.0)) {
        return Err(corrupt(key, "negative running variance"));
    }
    Ok(net)
}

pub fn read_fragment(dir: &Path, manifest: &FragmentManifest) -> Result<MlpNetwork> {
    if manifest.file.contains('/') || manifest.file.contains("..") {
        return Err(corrupt(&manifest.key, format!("refusing file path `{}`", manifest.file)));
    }
    let path = dir.join(&manifest.file);
    let bytes = fs::read(&path).map_err(|e| QflowError::io(path, e))?;
    decode(manifest, &bytes)
}
