//! Ground-truth benchmark dynamics.
//!
//! These are the "unknown" plants: they generate training data and close the
//! loop around a learned controller in simulation, but are never seen by the
//! model directly.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("unknown system {0:?} (expected vdp, pendulum or bicycle)")]
    UnknownSystem(String),
    #[error("{system}: expected state dim {n} and control dim {m}, got {got_n} and {got_m}")]
    Dimension { system: &'static str, n: usize, m: usize, got_n: usize, got_m: usize },
    #[error("bicycle dynamics undefined near d_e = 1 or |u| = π/2 (d_e = {d_e}, u = {u})")]
    Singular { d_e: f64, u: f64 },
}

/// Controlled Van der Pol oscillator, state `[z, ż]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanDerPol {
    pub mu: f64,
}

/// Pendulum about its upright position, state `[θ, θ̇]` with `θ` measured
/// from the inverted position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pendulum {
    pub mass: f64,
    pub gravity: f64,
    pub length: f64,
    pub damping: f64,
}

/// Constant-speed bicycle following the unit circle, state `[d_e, θ_e]`
/// (distance and heading error), input the steering angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bicycle {
    pub speed: f64,
    pub wheelbase: f64,
}

impl Default for VanDerPol {
    fn default() -> Self {
        VanDerPol { mu: 1.0 }
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Pendulum { mass: 0.15, gravity: 9.81, length: 0.5, damping: 0.1 }
    }
}

impl Default for Bicycle {
    fn default() -> Self {
        Bicycle { speed: 6.0, wheelbase: 1.0 }
    }
}

const SINGULAR_MARGIN: f64 = 1e-6;

impl VanDerPol {
    pub fn derivative(&self, x: [f64; 2], u: f64) -> [f64; 2] {
        let [z, zd] = x;
        [zd, u - z + self.mu * (1.0 - z * z) * zd]
    }
}

impl Pendulum {
    pub fn derivative(&self, x: [f64; 2], u: f64) -> [f64; 2] {
        let [th, thd] = x;
        let Pendulum { mass: m, gravity: g, length: l, damping: b } = *self;
        [thd, (m * g * l * th.sin() + u - b * thd) / (m * l * l)]
    }
}

impl Bicycle {
    pub fn derivative(&self, x: [f64; 2], u: f64) -> Result<[f64; 2], SystemError> {
        let [de, te] = x;
        if (de - 1.0).abs() <= SINGULAR_MARGIN || u.abs() >= PI / 2.0 - SINGULAR_MARGIN {
            return Err(SystemError::Singular { d_e: de, u });
        }
        let v = self.speed;
        Ok([v * te.sin(), v * u.tan() / self.wheelbase - v * te.cos() / (1.0 - de)])
    }
}

/// One of the benchmark plants with its physical parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum System {
    Vdp(VanDerPol),
    Pendulum(Pendulum),
    Bicycle(Bicycle),
}

/// Dimensions, sampling boxes and input limits of a benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemBounds {
    pub name: String,
    pub state_dim: usize,
    pub control_dim: usize,
    pub x_lb: Vec<f64>,
    pub x_ub: Vec<f64>,
    pub u_lim: Vec<f64>,
}

impl System {
    pub const NAMES: [&'static str; 3] = ["vdp", "pendulum", "bicycle"];

    pub fn name(&self) -> &'static str {
        match self {
            System::Vdp(_) => "vdp",
            System::Pendulum(_) => "pendulum",
            System::Bicycle(_) => "bicycle",
        }
    }

    pub fn state_dim(&self) -> usize {
        2
    }

    pub fn control_dim(&self) -> usize {
        1
    }

    pub fn bounds(&self) -> SystemBounds {
        let (bound, u_lim) = match self {
            System::Vdp(_) => (1.3, 5.0),
            System::Pendulum(_) => (4.0, 5.0),
            System::Bicycle(_) => (0.8, 0.4 * PI),
        };
        SystemBounds {
            name: self.name().to_string(),
            state_dim: 2,
            control_dim: 1,
            x_lb: vec![-bound; 2],
            x_ub: vec![bound; 2],
            u_lim: vec![u_lim],
        }
    }

    /// Input that holds the origin in place (zero for all but the bicycle,
    /// which must steer to stay on the circle).
    pub fn equilibrium_input(&self) -> Array1<f64> {
        match self {
            System::Bicycle(b) => Array1::from_elem(1, (b.wheelbase).atan()),
            _ => Array1::zeros(1),
        }
    }

    fn check(&self, n: usize, m: usize) -> Result<(), SystemError> {
        if n != 2 || m != 1 {
            return Err(SystemError::Dimension { system: self.name(), n: 2, m: 1, got_n: n, got_m: m });
        }
        Ok(())
    }

    pub fn dynamics(&self, x: ArrayView1<f64>, u: ArrayView1<f64>) -> Result<Array1<f64>, SystemError> {
        self.check(x.len(), u.len())?;
        let s = [x[0], x[1]];
        let d = match self {
            System::Vdp(p) => p.derivative(s, u[0]),
            System::Pendulum(p) => p.derivative(s, u[0]),
            System::Bicycle(p) => p.derivative(s, u[0])?,
        };
        Ok(Array1::from(d.to_vec()))
    }

    /// Whether moving from `a` to `b` touches or crosses the singular set
    /// (the bicycle's `d_e = 1`). A finite step can jump over the set without
    /// any evaluation landing inside the guard band, so integrators check the
    /// endpoints of every step.
    pub fn step_crosses_singularity(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> bool {
        match self {
            System::Bicycle(_) => {
                let (p, q) = (1.0 - a[0], 1.0 - b[0]);
                p * q <= 0.0 || p.abs() <= SINGULAR_MARGIN || q.abs() <= SINGULAR_MARGIN
            }
            _ => false,
        }
    }

    /// Row-wise evaluation; stops at the first singular row.
    pub fn dynamics_batch(&self, xs: ArrayView2<f64>, us: ArrayView2<f64>) -> Result<Array2<f64>, SystemError> {
        self.check(xs.ncols(), us.ncols())?;
        let mut out = Array2::zeros(xs.raw_dim());
        for ((x, u), mut o) in xs.rows().into_iter().zip(us.rows()).zip(out.rows_mut()) {
            let d = self.dynamics(x, u)?;
            o.assign(&d);
        }
        Ok(out)
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = SystemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vdp" => Ok(System::Vdp(VanDerPol::default())),
            "pendulum" => Ok(System::Pendulum(Pendulum::default())),
            "bicycle" => Ok(System::Bicycle(Bicycle::default())),
            other => Err(SystemError::UnknownSystem(other.to_string())),
        }
    }
}
