//! Sample-based audits of the stability guarantees and the data-density
//! certificate.
//!
//! Every supremum here is a Monte-Carlo estimate: a lower bound on the true
//! value, reported with its sample count and seed. None of it is a proof.

mod certificate;

pub use certificate::{certificate, CertificateOptions, CertificateReport};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{CoilsModel, Hyper, ModelError};
use crate::sim::{SimError, Trajectory};
use crate::systems::SystemError;
use crate::training::DatasetError;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// States within this distance of the origin are left out of ratio and
/// decrease sampling, where both sides of the inequalities vanish.
pub const ORIGIN_EXCLUSION: f64 = 1e-3;

/// Relative tolerance of the exponential envelope checks.
pub const DECAY_TOLERANCE: f64 = 0.02;

const CHUNK: usize = 4096;

/// Uniform draws from the state box with `‖x‖ ≥ min_norm`, by rejection.
/// Consecutive calls with a growing `count` and the same stream agree on
/// their common prefix.
pub(crate) fn box_samples(hyper: &Hyper, count: usize, min_norm: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = hyper.state_dim();
    let mut out = Array2::zeros((count, n));
    let mut filled = 0;
    while filled < count {
        let mut row = out.row_mut(filled);
        for j in 0..n {
            row[j] = rng.random_range(hyper.x_lb[j]..=hyper.x_ub[j]);
        }
        if row.dot(&row).sqrt() >= min_norm {
            filled += 1;
        }
    }
    out
}

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecreaseReport {
    /// Largest `∇Vᵀ f*(x, u*(x)) + αV` over the audited samples; `None`
    /// when every sample was excluded.
    pub max_residual: Option<f64>,
    pub samples: usize,
    /// Samples with `‖∇V‖² ≥ ε_proj`, the region where the guarantee applies.
    pub audited: usize,
    /// Samples where the projection denominator sat on its floor.
    pub floor_activations: usize,
    pub seed: u64,
    pub projection_enabled: bool,
}

impl DecreaseReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_residual.is_none_or(|r| r <= tol)
    }
}

/// Audits the decrease condition on `n_samples` uniform states away from
/// the origin.
pub fn check_decrease(model: &CoilsModel, n_samples: usize, seed: u64) -> Result<DecreaseReport, VerifyError> {
    if n_samples == 0 {
        return Err(VerifyError::Invalid("n_samples must be at least 1".into()));
    }
    let mut rng = stream(seed, 1);
    let mut max: Option<f64> = None;
    let (mut audited, mut floor) = (0, 0);
    let mut left = n_samples;
    while left > 0 {
        let take = left.min(CHUNK);
        left -= take;
        let xs = box_samples(&model.hyper, take, ORIGIN_EXCLUSION, &mut rng);
        let e = model.evaluate_batch(xs.view())?;
        let f = e.closed_loop();
        for i in 0..take {
            let g = e.grad_v.row(i);
            if g.dot(&g) < model.hyper.eps_proj {
                floor += 1;
                continue;
            }
            audited += 1;
            let r = g.dot(&f.row(i)) + model.hyper.alpha * e.v[i];
            max = Some(max.map_or(r, |m: f64| m.max(r)));
        }
    }
    Ok(DecreaseReport {
        max_residual: max,
        samples: n_samples,
        audited,
        floor_activations: floor,
        seed,
        projection_enabled: model.projection_enabled,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub passed: bool,
    /// Largest `V(x(t)) / (V(x(0)) e^{−αt})`.
    pub worst_v_ratio: f64,
    /// Largest `‖x(t)‖ / (sqrt(V(x(0))/ε_pd) e^{−αt/2})`.
    pub worst_norm_ratio: f64,
    pub tolerance: f64,
}

fn ratio(value: f64, bound: f64) -> f64 {
    if bound > 0.0 {
        value / bound
    } else if value <= 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Pointwise check of the exponential envelopes of `V` and `‖x‖` along a
/// learned-plant trajectory, with [`DECAY_TOLERANCE`].
pub fn decay_bound_check(traj: &Trajectory, hyper: &Hyper) -> DecayReport {
    let v0 = traj.v.first().copied().unwrap_or(0.0);
    let mut worst_v: f64 = 0.0;
    let mut worst_n: f64 = 0.0;
    for k in 0..traj.len() {
        let decay = (-hyper.alpha * traj.times[k]).exp();
        worst_v = worst_v.max(ratio(traj.v[k], v0 * decay));
        worst_n = worst_n.max(ratio(traj.norm[k], (v0 / hyper.eps_pd).sqrt() * decay.sqrt()));
    }
    let limit = 1.0 + DECAY_TOLERANCE;
    DecayReport {
        passed: worst_v <= limit && worst_n <= limit,
        worst_v_ratio: worst_v,
        worst_norm_ratio: worst_n,
        tolerance: DECAY_TOLERANCE,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadBoundReport {
    pub r1: f64,
    pub r2: f64,
    /// Sampled sup of `V(x)/‖x‖²` over `r1 ≤ ‖x‖ ≤ r2`.
    pub m: f64,
    /// Sampled sup of `V(x)/‖x‖²` over the box minus a small ball.
    pub c2_global: f64,
    /// The quadratic floor `ε_pd`, a lower constant valid everywhere.
    pub c1: f64,
    pub annulus_samples: usize,
    pub global_samples: usize,
    pub seed: u64,
}

/// Upper bound on `V(x)/‖x‖²` for `‖x‖ ≥ r1` implied by the bounded Lyapunov
/// network: the shifted output lies below `2 v_cap`, and the smoothed ReLU
/// satisfies `σ(s) ≤ s − d/2` there.
pub fn quadratic_ratio_cap(hyper: &Hyper, r1: f64) -> f64 {
    hyper.eps_pd + (2.0 * hyper.v_cap - hyper.d / 2.0) / (r1 * r1)
}

/// Uniform samples from the annulus `r1 ≤ ‖x‖ ≤ r2` in `R^n`.
fn annulus_samples(n: usize, r1: f64, r2: f64, count: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut out = Array2::zeros((count, n));
    let (a, b) = (r1.powi(n as i32), r2.powi(n as i32));
    for mut row in out.rows_mut() {
        // Direction from rejection in the unit cube.
        loop {
            for v in row.iter_mut() {
                *v = rng.random_range(-1.0..=1.0);
            }
            let s = row.dot(&row);
            if s > 1e-12 && s <= 1.0 {
                row /= f64::sqrt(s);
                break;
            }
        }
        let radius = (a + rng.random::<f64>() * (b - a)).powf(1.0 / n as f64);
        row *= radius;
    }
    out
}

fn max_ratio(model: &CoilsModel, xs: ArrayView2<f64>) -> Result<f64, VerifyError> {
    let mut best = f64::NEG_INFINITY;
    let mut start = 0;
    while start < xs.nrows() {
        let end = (start + CHUNK).min(xs.nrows());
        let part = xs.slice(ndarray::s![start..end, ..]);
        let (v, _) = model.lyapunov_batch(part)?;
        for (x, v) in part.rows().into_iter().zip(&v) {
            best = best.max(v / x.dot(&x));
        }
        start = end;
    }
    Ok(best)
}

pub fn estimate_quadratic_ratio(
    model: &CoilsModel,
    r1: f64,
    r2: f64,
    n_samples: usize,
    seed: u64,
) -> Result<QuadBoundReport, VerifyError> {
    if !(r1 > 0.0 && r2 >= r1 && r2.is_finite()) {
        return Err(VerifyError::Invalid(format!("need 0 < r1 ≤ r2, got {r1}, {r2}")));
    }
    if n_samples == 0 {
        return Err(VerifyError::Invalid("n_samples must be at least 1".into()));
    }
    let ann = annulus_samples(model.state_dim(), r1, r2, n_samples, &mut stream(seed, 2));
    let glob = box_samples(&model.hyper, n_samples, ORIGIN_EXCLUSION, &mut stream(seed, 3));
    Ok(QuadBoundReport {
        r1,
        r2,
        m: max_ratio(model, ann.view())?,
        c2_global: max_ratio(model, glob.view())?,
        c1: model.hyper.eps_pd,
        annulus_samples: n_samples,
        global_samples: n_samples,
        seed,
    })
}
