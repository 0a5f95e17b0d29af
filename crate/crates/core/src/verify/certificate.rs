use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{box_samples, stream, VerifyError, CHUNK};
use crate::models::CoilsModel;
use crate::systems::System;
use crate::training::{Dataset, DatasetError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificateOptions {
    /// Radius of the target ball; `None` means `0.05 ‖x_ub‖`.
    pub r: Option<f64>,
    /// States drawn for the coverage gap and for `M_r`.
    pub n_samples: usize,
    /// Close pairs drawn for each Lipschitz estimate.
    pub n_pairs: usize,
    /// Separation of the Lipschitz pairs in joint `(x, u)` space.
    pub pair_separation: f64,
    pub seed: u64,
}

impl Default for CertificateOptions {
    fn default() -> Self {
        CertificateOptions { r: None, n_samples: 10_000, n_pairs: 10_000, pair_separation: 1e-3, seed: 0 }
    }
}

/// Every term of the data-density condition
/// `(L_f + L_f*) δ + e < α ε_pd r² / M_r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub r: f64,
    /// Largest distance from a sampled `(x, u*(x))` to its nearest data point.
    pub delta: f64,
    /// Largest `‖f(y, v) − f*(y, v)‖` over the dataset, computed exactly.
    pub e: f64,
    pub l_f: f64,
    pub l_fstar: f64,
    /// Largest sampled `‖∇V‖` outside the ball of radius `r`.
    pub m_r: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub dataset_size: usize,
    pub n_samples: usize,
    pub n_pairs: usize,
    pub pair_separation: f64,
    pub seed: u64,
    /// Estimates that are sample maxima, so lower bounds on the quantities
    /// the condition is stated with.
    pub sampled_not_certified: Vec<String>,
    pub note: String,
}

/// Projected model on every row, evaluated in one batch.
fn fstar(model: &CoilsModel, xs: ArrayView2<f64>, us: ArrayView2<f64>) -> Result<Array2<f64>, VerifyError> {
    Ok(model.project_batch(xs, us)?)
}

fn row_norms_of_difference(a: &Array2<f64>, b: &Array2<f64>) -> Array1<f64> {
    (a - b).map_axis(Axis(1), |r| r.dot(&r).sqrt())
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, f64::max)
}

/// Largest nearest-neighbour distance from the rows of `queries` to the rows
/// of `points`.
pub(crate) fn coverage_gap(queries: ArrayView2<f64>, points: ArrayView2<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for q in queries.rows() {
        let mut best = f64::INFINITY;
        for p in points.rows() {
            let mut d = 0.0;
            for (a, b) in q.iter().zip(p) {
                d += (a - b) * (a - b);
                if d >= best {
                    break;
                }
            }
            best = best.min(d);
        }
        worst = worst.max(best);
    }
    worst.sqrt()
}

/// `count` pairs `(z, z + s·w)` in joint space with `w` a uniform unit direction.
fn close_pairs(model: &CoilsModel, count: usize, sep: f64, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
    let h = &model.hyper;
    let (n, m) = (h.state_dim(), h.control_dim());
    let mut a = Array2::zeros((count, n + m));
    let mut b = Array2::zeros((count, n + m));
    for i in 0..count {
        for j in 0..n {
            a[[i, j]] = rng.random_range(h.x_lb[j]..=h.x_ub[j]);
        }
        for k in 0..m {
            let lim = h.u_lim[k];
            a[[i, n + k]] = if lim > 0.0 { rng.random_range(-lim..=lim) } else { 0.0 };
        }
        let mut w = Array1::<f64>::zeros(n + m);
        loop {
            w.iter_mut().for_each(|v| *v = rng.random_range(-1.0..=1.0));
            let s = w.dot(&w);
            if s > 1e-12 && s <= 1.0 {
                w /= s.sqrt();
                break;
            }
        }
        let moved = &a.row(i) + &(w * sep);
        b.row_mut(i).assign(&moved);
    }
    (a, b)
}

pub(crate) fn lipschitz<F>(a: &Array2<f64>, b: &Array2<f64>, n: usize, mut f: F) -> Result<f64, VerifyError>
where
    F: FnMut(ArrayView2<f64>, ArrayView2<f64>) -> Result<Array2<f64>, VerifyError>,
{
    let mut best: f64 = 0.0;
    let mut start = 0;
    while start < a.nrows() {
        let end = (start + CHUNK).min(a.nrows());
        let (pa, pb) = (a.slice(ndarray::s![start..end, ..]), b.slice(ndarray::s![start..end, ..]));
        let fa = f(pa.slice(ndarray::s![.., ..n]), pa.slice(ndarray::s![.., n..]))?;
        let fb = f(pb.slice(ndarray::s![.., ..n]), pb.slice(ndarray::s![.., n..]))?;
        let num = row_norms_of_difference(&fa, &fb);
        let den = row_norms_of_difference(&pa.to_owned(), &pb.to_owned());
        for (p, q) in num.iter().zip(&den) {
            best = best.max(p / q);
        }
        start = end;
    }
    Ok(best)
}

/// Audits the data-density certificate for `model` against `system` on the
/// training data `data`.
///
/// `e` is exact. `δ`, `M_r`, `L_f` and `L_f*` are maxima over seeded samples
/// and are flagged as such in the report. Each estimate draws from its own
/// random stream, so raising a sample count only adds samples.
pub fn certificate(
    model: &CoilsModel,
    system: &System,
    data: &Dataset,
    opts: &CertificateOptions,
) -> Result<CertificateReport, VerifyError> {
    if data.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    let (n, m) = (model.state_dim(), model.control_dim());
    if data.state_dim() != n || data.control_dim() != m {
        return Err(VerifyError::Invalid(format!("dataset is {}×{}, model is {n}×{m}", data.state_dim(), data.control_dim())));
    }
    if opts.n_samples == 0 || opts.n_pairs == 0 || opts.pair_separation.is_nan() || opts.pair_separation <= 0.0 {
        return Err(VerifyError::Invalid("sample counts and pair separation must be positive".into()));
    }
    let hyper = &model.hyper;
    let r = opts.r.unwrap_or_else(|| 0.05 * hyper.x_ub.iter().map(|v| v * v).sum::<f64>().sqrt());
    if !(r > 0.0 && r.is_finite()) {
        return Err(VerifyError::Invalid(format!("r must be positive, got {r}")));
    }

    let truth = system.dynamics_batch(data.states.view(), data.inputs.view())?;
    let model_f = fstar(model, data.states.view(), data.inputs.view())?;
    let e = max_of(row_norms_of_difference(&truth, &model_f));

    let xs = box_samples(hyper, opts.n_samples, 0.0, &mut stream(opts.seed, 11));
    let us = model.controller_batch(xs.view())?;
    let queries = concatenate(Axis(1), &[xs.view(), us.view()]).expect("equal rows");
    let delta = coverage_gap(queries.view(), data.joint().view());

    let outer = box_samples(hyper, opts.n_samples, r, &mut stream(opts.seed, 12));
    let (_, grads) = model.lyapunov_batch(outer.view())?;
    let m_r = max_of(grads.rows().into_iter().map(|g| g.dot(&g).sqrt()));

    let (a, b) = close_pairs(model, opts.n_pairs, opts.pair_separation, &mut stream(opts.seed, 13));
    let l_f = lipschitz(&a, &b, n, |x, u| Ok(system.dynamics_batch(x, u)?))?;
    let (a, b) = close_pairs(model, opts.n_pairs, opts.pair_separation, &mut stream(opts.seed, 14));
    let l_fstar = lipschitz(&a, &b, n, |x, u| fstar(model, x, u))?;

    let lhs = (l_f + l_fstar) * delta + e;
    let rhs = hyper.alpha * hyper.eps_pd * r * r / m_r;
    Ok(CertificateReport {
        r,
        delta,
        e,
        l_f,
        l_fstar,
        m_r,
        lhs,
        rhs,
        holds: lhs < rhs,
        dataset_size: data.len(),
        n_samples: opts.n_samples,
        n_pairs: opts.n_pairs,
        pair_separation: opts.pair_separation,
        seed: opts.seed,
        sampled_not_certified: ["delta", "m_r", "l_f", "l_fstar"].map(String::from).to_vec(),
        note: "Monte-Carlo audit: sampled maxima under-estimate the suprema in the condition; e is exact on the dataset.".into(),
    })
}
