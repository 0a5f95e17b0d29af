//! The JSON run configuration shared by every subcommand.

use std::path::Path;

use coils::models::{Architecture, Hyper};
use coils::systems::System;
use coils::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One experiment. Every field has a default, so `{}` is a valid file; unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Directory name under the output root; empty means the system name.
    pub name: String,
    pub system: String,
    pub seed: u64,
    pub hyper: HyperOverrides,
    pub architecture: Architecture,
    pub sample: SampleConfig,
    pub train: TrainSection,
    pub simulate: SimulateConfig,
    pub portrait: PortraitConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: String::new(),
            system: "vdp".into(),
            seed: 0,
            hyper: HyperOverrides::default(),
            architecture: Architecture::default(),
            sample: SampleConfig::default(),
            train: TrainSection::default(),
            simulate: SimulateConfig::default(),
            portrait: PortraitConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

/// Per-key overrides of the default hyperparameters. `beta` follows
/// `u_lim` unless set explicitly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_pd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_proj: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_cap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_lim: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_lb: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_ub: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub count: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { count: 100_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub holdout: f64,
    /// Continue from `checkpoint.json` in the run directory; `epochs` is
    /// then the total to reach.
    pub resume: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            clip_norm: t.clip_norm,
            holdout: t.holdout,
            resume: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// Number of seeded random starts, ignored when `starts` is given.
    pub trajectories: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub starts: Option<Vec<Vec<f64>>>,
    pub horizon: f64,
    pub step: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { trajectories: 5, starts: None, horizon: 10.0, step: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PortraitConfig {
    pub resolution: usize,
    /// Also export the true plant closed around `u*`.
    pub true_field: bool,
}

impl Default for PortraitConfig {
    fn default() -> Self {
        PortraitConfig { resolution: 41, true_field: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub ablate_projection: bool,
    pub decrease: DecreaseCheck,
    pub decay: DecayCheck,
    pub quadratic: QuadraticCheck,
    pub certificate: CertificateCheck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecreaseCheck {
    pub enabled: bool,
    pub samples: usize,
    pub tolerance: f64,
}

impl Default for DecreaseCheck {
    fn default() -> Self {
        DecreaseCheck { enabled: true, samples: 100_000, tolerance: 1e-9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecayCheck {
    pub enabled: bool,
    pub rollouts: usize,
    pub horizon: f64,
    pub step: f64,
}

impl Default for DecayCheck {
    fn default() -> Self {
        DecayCheck { enabled: true, rollouts: 20, horizon: 10.0, step: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadraticCheck {
    pub enabled: bool,
    /// Inner radius; `None` means `0.05 ‖x_ub‖`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r1: Option<f64>,
    /// Outer radius; `None` means the farthest corner of the box.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    pub samples: usize,
}

impl Default for QuadraticCheck {
    fn default() -> Self {
        QuadraticCheck { enabled: true, r1: None, r2: None, samples: 10_000 }
    }
}

/// The certificate is always reported, never part of the pass/fail verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificateCheck {
    pub enabled: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    pub samples: usize,
    pub pairs: usize,
    pub pair_separation: f64,
}

impl Default for CertificateCheck {
    fn default() -> Self {
        CertificateCheck { enabled: true, r: None, samples: 10_000, pairs: 10_000, pair_separation: 1e-3 }
    }
}

/// Per-stage seeds derived from the run seed. Sampling uses the seed itself,
/// so `sample --seed s` reproduces `sample_dataset(.., s)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Sample = 0,
    Init = 1,
    Train = 2,
    Simulate = 3,
    Verify = 4,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Fills in the run name.
    pub fn resolve(&mut self) {
        if self.name.is_empty() {
            self.name = self.system.clone();
        }
    }

    pub fn system(&self) -> Result<System, CliError> {
        self.system.parse().map_err(|e: coils::systems::SystemError| CliError::Config(e.to_string()))
    }

    pub fn hyper(&self) -> Result<Hyper, CliError> {
        let mut h = Hyper::for_system(&self.system()?.bounds());
        let o = &self.hyper;
        if let Some(u) = &o.u_lim {
            h.u_lim = u.clone();
            let u_max = u.iter().copied().fold(0.0, f64::max);
            h.beta = if u_max > 0.0 { 5.0 / u_max } else { 5.0 };
        }
        for (slot, v) in [
            (&mut h.alpha, o.alpha),
            (&mut h.beta, o.beta),
            (&mut h.lambda, o.lambda),
            (&mut h.eps_pd, o.eps_pd),
            (&mut h.eps_proj, o.eps_proj),
            (&mut h.d, o.d),
            (&mut h.v_cap, o.v_cap),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        if let Some(v) = &o.x_lb {
            h.x_lb = v.clone();
        }
        if let Some(v) = &o.x_ub {
            h.x_ub = v.clone();
        }
        h.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(h)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            clip_norm: t.clip_norm,
            seed: self.stage_seed(Stage::Train),
            deterministic: true,
            holdout: t.holdout,
        }
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed.wrapping_add((stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Semantic checks that serde cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return bad("name must be a plain directory name");
        }
        let system = self.system()?;
        let h = self.hyper()?;
        if h.state_dim() != system.state_dim() || h.control_dim() != system.control_dim() {
            return Err(CliError::Config(format!(
                "bounds are {}×{}, {} needs {}×{}",
                h.state_dim(),
                h.control_dim(),
                system,
                system.state_dim(),
                system.control_dim()
            )));
        }
        if self.sample.count == 0 {
            return bad("sample.count must be at least 1");
        }
        self.train_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        let s = &self.simulate;
        if !(s.step > 0.0 && s.step.is_finite() && s.horizon > 0.0 && s.horizon.is_finite()) {
            return bad("simulate.step and simulate.horizon must be positive");
        }
        if let Some(starts) = &s.starts {
            if starts.iter().any(|x| x.len() != h.state_dim() || x.iter().any(|v| !v.is_finite())) {
                return bad("simulate.starts must hold finite states of the system's dimension");
            }
        }
        if self.portrait.resolution < 2 {
            return bad("portrait.resolution must be at least 2");
        }
        let v = &self.verify;
        if v.decrease.samples == 0 || v.decrease.tolerance.is_nan() || v.decrease.tolerance < 0.0 {
            return bad("verify.decrease needs samples ≥ 1 and a nonnegative tolerance");
        }
        if !(v.decay.step > 0.0 && v.decay.horizon > 0.0 && v.decay.step.is_finite() && v.decay.horizon.is_finite()) {
            return bad("verify.decay.step and verify.decay.horizon must be positive");
        }
        if v.quadratic.samples == 0 || v.certificate.samples == 0 || v.certificate.pairs == 0 {
            return bad("verify sample counts must be at least 1");
        }
        Ok(())
    }

    /// Compact single-line JSON, the form embedded in artifacts.
    pub fn to_compact_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
