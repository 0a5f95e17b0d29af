//! Fixed-step integration, closed-loop rollouts and planar grid exports.

mod field;

pub use field::{export_field, FieldGrid, FieldKind};

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{CoilsModel, ModelError};
use crate::systems::{System, SystemError};
use crate::training::format_float;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("non-finite state derivative in stage {stage}")]
    NonFinite { stage: usize },
    #[error("initial state has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("grid export needs a planar state, got dimension {0}")]
    UnsupportedDimension(usize),
    #[error("grid resolution must be at least 2, got {0}")]
    Resolution(usize),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// One classical Runge–Kutta step for every row of `xs`.
///
/// ```
/// use coils::sim::rk4_step;
/// use ndarray::array;
/// let x = rk4_step(|x| Ok(x.mapv(|v| -v)), array![[1.0]].view(), 0.1).unwrap();
/// assert!((x[[0, 0]] - (-0.1f64).exp()).abs() < 1e-7);
/// ```
pub fn rk4_step<F>(mut field: F, xs: ArrayView2<f64>, h: f64) -> Result<Array2<f64>, SimError>
where
    F: FnMut(ArrayView2<f64>) -> Result<Array2<f64>, SimError>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(SimError::InvalidStep(h));
    }
    let k1 = field(xs)?;
    rk4_finish(&mut field, xs, k1, h)
}

/// The remaining three stages given the first.
fn rk4_finish<F>(field: &mut F, xs: ArrayView2<f64>, k1: Array2<f64>, h: f64) -> Result<Array2<f64>, SimError>
where
    F: FnMut(ArrayView2<f64>) -> Result<Array2<f64>, SimError>,
{
    let check =
        |k: &Array2<f64>, stage| if k.iter().all(|v| v.is_finite()) { Ok(()) } else { Err(SimError::NonFinite { stage }) };
    check(&k1, 1)?;
    let k2 = field((&xs + &(&k1 * (h / 2.0))).view())?;
    check(&k2, 2)?;
    let k3 = field((&xs + &(&k2 * (h / 2.0))).view())?;
    check(&k3, 3)?;
    let k4 = field((&xs + &(&k3 * h)).view())?;
    check(&k4, 4)?;
    let mut incr = k1;
    incr.scaled_add(2.0, &k2);
    incr.scaled_add(2.0, &k3);
    incr += &k4;
    Ok(&xs + &(incr * (h / 6.0)))
}

/// Which dynamics the learned controller is closed around.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Plant {
    True(System),
    /// The projected model `f*` itself.
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutOptions {
    pub horizon: f64,
    pub step: f64,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions { horizon: 10.0, step: 1e-3 }
    }
}

impl RolloutOptions {
    fn steps(&self) -> Result<usize, SimError> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(SimError::InvalidStep(self.step));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(SimError::InvalidHorizon(self.horizon));
        }
        Ok((self.horizon / self.step - 1e-9).ceil() as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RolloutStatus {
    Completed,
    /// `‖x‖` left ten times the box diameter at time `t`.
    Escaped {
        t: f64,
    },
    /// The true plant hit its singular set during the step starting at `t`.
    Singular {
        t: f64,
    },
}

/// A sampled closed-loop trajectory. Row `k` of every field belongs to
/// `times[k] = k h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Array2<f64>,
    pub controls: Array2<f64>,
    /// The model's `V` along the states.
    pub v: Vec<f64>,
    pub norm: Vec<f64>,
    pub status: RolloutStatus,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> ArrayView1<'_, f64> {
        self.states.row(self.len() - 1)
    }

    /// Columns `t, x1.., u1.., V, normx`.
    pub fn write_csv(&self, path: &Path) -> Result<(), SimError> {
        self.write_csv_to(create(path)?)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> Result<(), SimError> {
        let (n, m) = (self.states.ncols(), self.controls.ncols());
        let mut w = csv::Writer::from_writer(out);
        let mut head = vec!["t".to_string()];
        head.extend((1..=n).map(|i| format!("x{i}")));
        head.extend((1..=m).map(|i| format!("u{i}")));
        head.extend(["V".to_string(), "normx".to_string()]);
        w.write_record(&head)?;
        for k in 0..self.len() {
            let mut row = vec![format_float(self.times[k])];
            row.extend(self.states.row(k).iter().chain(self.controls.row(k)).map(|v| format_float(*v)));
            row.push(format_float(self.v[k]));
            row.push(format_float(self.norm[k]));
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub(crate) fn create(path: &Path) -> Result<std::fs::File, SimError> {
    std::fs::File::create(path).map_err(|e| SimError::Io { path: path.display().to_string(), source: e })
}

struct Recorder {
    times: Vec<f64>,
    states: Vec<f64>,
    controls: Vec<f64>,
    v: Vec<f64>,
    norm: Vec<f64>,
    status: Option<RolloutStatus>,
}

impl Recorder {
    fn new(capacity: usize, n: usize, m: usize) -> Self {
        Recorder {
            times: Vec::with_capacity(capacity),
            states: Vec::with_capacity(capacity * n),
            controls: Vec::with_capacity(capacity * m),
            v: Vec::with_capacity(capacity),
            norm: Vec::with_capacity(capacity),
            status: None,
        }
    }

    fn push(&mut self, t: f64, x: ArrayView1<f64>, u: ArrayView1<f64>, v: f64) {
        self.times.push(t);
        self.states.extend(x.iter());
        self.controls.extend(u.iter());
        self.v.push(v);
        self.norm.push(x.dot(&x).sqrt());
    }

    fn finish(self, n: usize, m: usize) -> Trajectory {
        let len = self.times.len();
        Trajectory {
            times: self.times,
            states: Array2::from_shape_vec((len, n), self.states).expect("rows pushed whole"),
            controls: Array2::from_shape_vec((len, m), self.controls).expect("rows pushed whole"),
            v: self.v,
            norm: self.norm,
            status: self.status.unwrap_or(RolloutStatus::Completed),
        }
    }
}

/// Integrates `ẋ = plant(x, u*(x))` from `x0`.
pub fn rollout(plant: Plant, model: &CoilsModel, x0: ArrayView1<f64>, opts: &RolloutOptions) -> Result<Trajectory, SimError> {
    let mut out = rollout_batch(plant, model, x0.insert_axis(Axis(0)), opts)?;
    Ok(out.pop().expect("one start"))
}

/// Integrates every row of `x0s` in lockstep. Rows that escape or reach the
/// true plant's singular set stop early and carry the corresponding status.
pub fn rollout_batch(
    plant: Plant,
    model: &CoilsModel,
    x0s: ArrayView2<f64>,
    opts: &RolloutOptions,
) -> Result<Vec<Trajectory>, SimError> {
    let steps = opts.steps()?;
    let (n, m) = (model.state_dim(), model.control_dim());
    if x0s.ncols() != n {
        return Err(SimError::Dimension { expected: n, got: x0s.ncols() });
    }
    if let Plant::True(s) = plant {
        if s.state_dim() != n || s.control_dim() != m {
            return Err(SimError::Dimension { expected: s.state_dim(), got: n });
        }
    }
    let h = opts.step;
    let escape = 10.0 * model.hyper.box_diameter();
    let mut recs: Vec<Recorder> = (0..x0s.nrows()).map(|_| Recorder::new(steps + 1, n, m)).collect();
    let mut active: Vec<usize> = (0..x0s.nrows()).collect();
    let mut xs = x0s.to_owned();
    let frozen = model.freeze()?;

    for k in 0..=steps {
        if active.is_empty() {
            break;
        }
        let t = k as f64 * h;
        // First stage doubles as the record at time t.
        let (controls, v, k1) = match plant {
            Plant::Learned => {
                let e = frozen.evaluate_batch(xs.view())?;
                let f = e.closed_loop();
                (e.control, e.v, f)
            }
            Plant::True(system) => {
                let u = frozen.controller_batch(xs.view())?;
                let (v, _) = frozen.lyapunov_batch(xs.view())?;
                let f = true_field(&system, xs.view(), u.view());
                (u, v, f)
            }
        };
        for (r, &row) in active.iter().enumerate() {
            recs[row].push(t, xs.row(r), controls.row(r), v[r]);
        }
        if k == steps {
            break;
        }
        let next = match plant {
            Plant::Learned => rk4_finish(&mut |x: ArrayView2<f64>| Ok(frozen.closed_loop_batch(x)?), xs.view(), k1, h)?,
            Plant::True(system) => {
                let mut field = |x: ArrayView2<f64>| {
                    let u = frozen.controller_batch(x)?;
                    Ok(true_field(&system, x, u.view()))
                };
                rk4_lenient(&mut field, xs.view(), k1, h)?
            }
        };
        let mut keep = Vec::with_capacity(active.len());
        for (r, &row) in active.iter().enumerate() {
            let x = next.row(r);
            let crossed = matches!(plant, Plant::True(s) if s.step_crosses_singularity(xs.row(r), x));
            if crossed || x.iter().any(|v| !v.is_finite()) {
                recs[row].status = Some(RolloutStatus::Singular { t });
            } else if x.dot(&x).sqrt() > escape {
                recs[row].status = Some(RolloutStatus::Escaped { t: t + h });
            } else {
                keep.push(r);
            }
        }
        if keep.len() == active.len() {
            xs = next;
        } else {
            xs = next.select(Axis(0), &keep);
            active = keep.iter().map(|&r| active[r]).collect();
        }
    }
    Ok(recs.into_iter().map(|r| r.finish(n, m)).collect())
}

/// True derivative per row; singular rows come back as NaN so the caller
/// can truncate just those rollouts.
fn true_field(system: &System, xs: ArrayView2<f64>, us: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(xs.raw_dim());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        match system.dynamics(xs.row(i), us.row(i)) {
            Ok(d) => row.assign(&d),
            Err(_) => row.fill(f64::NAN),
        }
    }
    out
}

/// RK4 that lets NaN rows through instead of failing the whole batch.
fn rk4_lenient<F>(field: &mut F, xs: ArrayView2<f64>, k1: Array2<f64>, h: f64) -> Result<Array2<f64>, SimError>
where
    F: FnMut(ArrayView2<f64>) -> Result<Array2<f64>, SimError>,
{
    let k2 = field((&xs + &(&k1 * (h / 2.0))).view())?;
    let k3 = field((&xs + &(&k2 * (h / 2.0))).view())?;
    let k4 = field((&xs + &(&k3 * h)).view())?;
    let mut incr = k1;
    incr.scaled_add(2.0, &k2);
    incr.scaled_add(2.0, &k3);
    incr += &k4;
    Ok(&xs + &(incr * (h / 6.0)))
}

/// `count` starts drawn uniformly over the state box.
pub fn random_starts(model: &CoilsModel, count: usize, seed: u64) -> Array2<f64> {
    use rand::{Rng, SeedableRng};
    let h = &model.hyper;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((count, h.state_dim()), |(_, j)| rng.random_range(h.x_lb[j]..=h.x_ub[j]))
}

/// Single-state convenience wrapper around [`rk4_step`].
pub fn rk4_step_vec<F>(mut field: F, x: ArrayView1<f64>, h: f64) -> Result<Array1<f64>, SimError>
where
    F: FnMut(ArrayView1<f64>) -> Result<Array1<f64>, SimError>,
{
    let next = rk4_step(|xs| Ok(field(xs.row(0))?.insert_axis(Axis(0))), x.insert_axis(Axis(0)), h)?;
    Ok(next.row(0).to_owned())
}
