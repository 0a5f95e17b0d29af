//! Single-document JSON checkpoints.
//!
//! Floats are written in their shortest round-trip form, so a save/load
//! cycle reproduces every parameter bit for bit.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TrainConfig;
use crate::diffcore::{Activation, Layer, Network};
use crate::models::{AffineParts, CoilsModel, Dynamics, Hyper, Mode, ModelError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    activation: Activation,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    name: String,
    dims: Vec<usize>,
    layers: Vec<LayerDoc>,
}

/// Everything needed to rebuild a model, plus training bookkeeping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub hyper: Hyper,
    pub mode: Mode,
    pub projection_enabled: bool,
    networks: Vec<NetworkDoc>,
    /// Epochs completed so far, counting every resumed run.
    pub trained_epochs: usize,
    pub train_config: Option<TrainConfig>,
    /// Arbitrary caller metadata, typically the run configuration.
    pub config: Option<serde_json::Value>,
}

fn network_doc(name: &str, net: &Network) -> NetworkDoc {
    NetworkDoc {
        name: name.to_string(),
        dims: net.dims(),
        layers: net
            .layers()
            .iter()
            .map(|l| LayerDoc {
                activation: l.activation,
                weights: l.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
                bias: l.bias.to_vec(),
            })
            .collect(),
    }
}

fn network_from_doc(doc: &NetworkDoc) -> Result<Network, CheckpointError> {
    let shape = |m: String| CheckpointError::ShapeMismatch(format!("{}: {m}", doc.name));
    if doc.dims.len() != doc.layers.len() + 1 {
        return Err(shape(format!("{} dims for {} layers", doc.dims.len(), doc.layers.len())));
    }
    let mut layers = Vec::with_capacity(doc.layers.len());
    for (l, ld) in doc.layers.iter().enumerate() {
        let (inp, out) = (doc.dims[l], doc.dims[l + 1]);
        if ld.weights.len() != out || ld.weights.iter().any(|r| r.len() != inp) || ld.bias.len() != out {
            return Err(shape(format!("layer {l} does not match dims {inp}→{out}")));
        }
        let flat: Vec<f64> = ld.weights.iter().flatten().copied().collect();
        layers.push(Layer {
            weights: Array2::from_shape_vec((out, inp), flat).expect("rows checked"),
            bias: Array1::from(ld.bias.clone()),
            activation: ld.activation,
        });
    }
    Network::from_layers(layers).map_err(|e| CheckpointError::Malformed(format!("{}: {e}", doc.name)))
}

impl Checkpoint {
    pub fn from_model(model: &CoilsModel) -> Self {
        let docs = model.network_names().iter().zip(model.networks()).map(|(n, net)| network_doc(n, net)).collect();
        Checkpoint {
            format_version: FORMAT_VERSION,
            hyper: model.hyper.clone(),
            mode: model.mode(),
            projection_enabled: model.projection_enabled,
            networks: docs,
            trained_epochs: 0,
            train_config: None,
            config: None,
        }
    }

    pub fn model(&self) -> Result<CoilsModel, CheckpointError> {
        let names = match self.mode {
            Mode::General => ["gf", "gu", "gv"],
            Mode::ControlAffine => ["gf1", "gf2", "gv"],
        };
        let find = |name: &str| -> Result<Network, CheckpointError> {
            let doc = self
                .networks
                .iter()
                .find(|d| d.name == name)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing network {name}")))?;
            network_from_doc(doc)
        };
        if self.networks.len() != 3 {
            return Err(CheckpointError::Malformed(format!("expected 3 networks, found {}", self.networks.len())));
        }
        let [a, b, v] = names.map(find);
        let (a, b, gv) = (a?, b?, v?);
        let dynamics = match self.mode {
            Mode::General => Dynamics::General { gf: a, gu: b },
            Mode::ControlAffine => Dynamics::ControlAffine(AffineParts { gf1: a, gf2: b }),
        };
        let mut model = CoilsModel::new(dynamics, gv, self.hyper.clone()).map_err(|e| match e {
            ModelError::Dimension { .. } => CheckpointError::ShapeMismatch(e.to_string()),
            other => CheckpointError::Malformed(other.to_string()),
        })?;
        model.projection_enabled = self.projection_enabled;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CheckpointError::Malformed("missing format_version".into()))?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let ck: Checkpoint = serde_json::from_value(value).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json()).map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
        Self::from_json(&text)
    }
}

pub fn save_checkpoint(model: &CoilsModel, path: &Path) -> Result<(), CheckpointError> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<CoilsModel, CheckpointError> {
    Checkpoint::load(path)?.model()
}
