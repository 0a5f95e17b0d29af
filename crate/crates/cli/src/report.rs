use coils::models::CoilsModel;
use coils::sim::{random_starts, rollout_batch, Plant, RolloutOptions};
use coils::training::Dataset;
use coils::verify::{
    certificate, check_decrease, decay_bound_check, estimate_quadratic_ratio, quadratic_ratio_cap, CertificateOptions,
    CertificateReport, DecayReport, DecreaseReport, QuadBoundReport,
};
use serde::{Deserialize, Serialize};

use crate::config::Stage;
use crate::{Result, RunConfig};

/// JSON Schema (draft 2020-12) of `verify.json`.
pub const VERIFY_SCHEMA: &str = include_str!("../schema/verify.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecreaseSection {
    pub passed: bool,
    pub tolerance: f64,
    #[serde(flatten)]
    pub report: DecreaseReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecaySection {
    pub passed: bool,
    pub rollouts: usize,
    pub horizon: f64,
    pub step: f64,
    pub seed: u64,
    pub worst_v_ratio: f64,
    pub worst_norm_ratio: f64,
    pub trajectories: Vec<DecayReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSection {
    /// The sampled ratio stays below the bound implied by the capped network.
    pub passed: bool,
    pub cap: f64,
    #[serde(flatten)]
    pub report: QuadBoundReport,
}

/// Contents of `verify.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config: RunConfig,
    pub system: String,
    /// `checkpoint` or `initialization`.
    pub model_source: String,
    pub projection_enabled: bool,
    pub decrease: Option<DecreaseSection>,
    pub decay: Option<DecaySection>,
    pub quadratic: Option<QuadraticSection>,
    /// Reported only; it does not enter `passed`.
    pub certificate: Option<CertificateReport>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.decrease.as_ref().is_some_and(|s| !s.passed) {
            out.push("decrease");
        }
        if self.decay.as_ref().is_some_and(|s| !s.passed) {
            out.push("decay");
        }
        if self.quadratic.as_ref().is_some_and(|s| !s.passed) {
            out.push("quadratic");
        }
        out
    }
}

fn farthest_corner(model: &CoilsModel) -> f64 {
    let h = &model.hyper;
    h.x_lb.iter().zip(&h.x_ub).map(|(l, u)| l.abs().max(u.abs()).powi(2)).sum::<f64>().sqrt()
}

fn default_radius(model: &CoilsModel) -> f64 {
    0.05 * model.hyper.x_ub.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn build(cfg: &RunConfig, model: &CoilsModel, source: &str, data: Option<&Dataset>) -> Result<VerifyReport> {
    let v = &cfg.verify;
    let seed = cfg.stage_seed(Stage::Verify);

    let decrease = if v.decrease.enabled {
        let report = check_decrease(model, v.decrease.samples, seed)?;
        Some(DecreaseSection { passed: report.passes(v.decrease.tolerance), tolerance: v.decrease.tolerance, report })
    } else {
        None
    };

    let decay = if v.decay.enabled {
        let opts = RolloutOptions { horizon: v.decay.horizon, step: v.decay.step };
        let xs = random_starts(model, v.decay.rollouts, seed);
        let reports: Vec<DecayReport> =
            rollout_batch(Plant::Learned, model, xs.view(), &opts)?.iter().map(|t| decay_bound_check(t, &model.hyper)).collect();
        Some(DecaySection {
            passed: reports.iter().all(|r| r.passed),
            rollouts: v.decay.rollouts,
            horizon: v.decay.horizon,
            step: v.decay.step,
            seed,
            worst_v_ratio: reports.iter().map(|r| r.worst_v_ratio).fold(0.0, f64::max),
            worst_norm_ratio: reports.iter().map(|r| r.worst_norm_ratio).fold(0.0, f64::max),
            trajectories: reports,
        })
    } else {
        None
    };

    let quadratic = if v.quadratic.enabled {
        let r1 = v.quadratic.r1.unwrap_or_else(|| default_radius(model));
        let r2 = v.quadratic.r2.unwrap_or_else(|| farthest_corner(model)).max(r1);
        let report = estimate_quadratic_ratio(model, r1, r2, v.quadratic.samples, seed)?;
        let cap = quadratic_ratio_cap(&model.hyper, r1);
        Some(QuadraticSection { passed: report.m.is_finite() && report.m <= cap, cap, report })
    } else {
        None
    };

    let certificate = match data {
        Some(data) => {
            let opts = CertificateOptions {
                r: v.certificate.r,
                n_samples: v.certificate.samples,
                n_pairs: v.certificate.pairs,
                pair_separation: v.certificate.pair_separation,
                seed,
            };
            Some(certificate(model, &cfg.system()?, data, &opts)?)
        }
        None => None,
    };

    let mut report = VerifyReport {
        config: cfg.clone(),
        system: cfg.system.clone(),
        model_source: source.into(),
        projection_enabled: model.projection_enabled,
        decrease,
        decay,
        quadratic,
        certificate,
        passed: false,
    };
    report.passed = report.failures().is_empty();
    Ok(report)
}
