//! The jointly learned triple: nominal dynamics, bounded controller and
//! Lyapunov candidate, tied together by the stability projection.
//!
//! The closed loop `ẋ = f*(x, u*(x))` of every [`CoilsModel`] satisfies
//! `∇V(x)ᵀ ẋ ≤ −αV(x)` wherever `‖∇V(x)‖² ≥ ε_proj`, whatever the network
//! parameters are. Nothing here is learned to be stable; it is built that way.

mod projection;
mod record;

pub use projection::{decrease_residual, stability_correction};
pub use record::RecordedBatch;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Activation, DiffError, Network};
use crate::systems::SystemBounds;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("operation requires control-affine mode")]
    NotAffine,
}

/// Scalars of the construction and the box the data lives in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    /// Required exponential decay rate of `V` along the closed loop.
    pub alpha: f64,
    /// Sharpness of the control kernel in the loss.
    pub beta: f64,
    /// ℓ² weight on the parameters.
    pub lambda: f64,
    /// Quadratic floor of `V`.
    pub eps_pd: f64,
    /// Floor of `‖∇V‖²` in the projection denominator.
    pub eps_proj: f64,
    /// Smoothing width of the smoothed ReLU.
    pub d: f64,
    pub u_lim: Vec<f64>,
    pub x_lb: Vec<f64>,
    pub x_ub: Vec<f64>,
    /// Output scale of the Lyapunov network's final `tanh`.
    pub v_cap: f64,
}

impl Hyper {
    /// Defaults (α = 1, λ = 0, ε_pd = 0.5, ε_proj = 1e-3,
    /// d = 0.005, tanh cap 10) with `β = 5 / max u_lim` and the system's
    /// sampling box.
    pub fn for_system(bounds: &SystemBounds) -> Self {
        let u_max = bounds.u_lim.iter().copied().fold(0.0, f64::max);
        Hyper {
            alpha: 1.0,
            beta: if u_max > 0.0 { 5.0 / u_max } else { 5.0 },
            lambda: 0.0,
            eps_pd: 0.5,
            eps_proj: 1e-3,
            d: 0.005,
            u_lim: bounds.u_lim.clone(),
            x_lb: bounds.x_lb.clone(),
            x_ub: bounds.x_ub.clone(),
            v_cap: 10.0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.x_lb.len()
    }

    pub fn control_dim(&self) -> usize {
        self.u_lim.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Hyper(m));
        let scalars = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("eps_pd", self.eps_pd),
            ("eps_proj", self.eps_proj),
            ("d", self.d),
            ("v_cap", self.v_cap),
        ];
        if let Some((name, _)) = scalars.iter().find(|(_, v)| !v.is_finite()) {
            return bad(format!("{name} is not finite"));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("eps_pd", self.eps_pd),
            ("eps_proj", self.eps_proj),
            ("d", self.d),
            ("v_cap", self.v_cap),
            ("beta", self.beta),
        ] {
            if v <= 0.0 {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.lambda < 0.0 {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if self.u_lim.is_empty() || self.u_lim.iter().any(|u| !(u.is_finite() && *u >= 0.0)) {
            return bad(format!("u_lim must be nonempty, finite and nonnegative: {:?}", self.u_lim));
        }
        if self.x_lb.is_empty() || self.x_lb.len() != self.x_ub.len() {
            return bad("x_lb and x_ub must be nonempty and of equal length".into());
        }
        if self.x_lb.iter().zip(&self.x_ub).any(|(l, u)| !(l.is_finite() && u.is_finite() && l < u)) {
            return bad(format!("need x_lb < x_ub componentwise: {:?} vs {:?}", self.x_lb, self.x_ub));
        }
        Ok(())
    }

    /// Euclidean diameter of the state box.
    pub fn box_diameter(&self) -> f64 {
        self.x_lb.iter().zip(&self.x_ub).map(|(l, u)| (u - l) * (u - l)).sum::<f64>().sqrt()
    }
}

/// How the nominal dynamics and the controller are parameterized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Unstructured `f̂(x, u)` and a learned bounded controller.
    #[default]
    General,
    /// `f̂(x, u) = f̂₁(x) + f̂₂(x) u` with the bang-bang controller that
    /// minimizes `∇Vᵀ f̂₂ u` over the input box.
    ControlAffine,
}

/// Hidden activation of the dynamics and controller networks. The Lyapunov
/// network always uses smoothed ReLUs so `V` stays C¹.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HiddenKind {
    #[default]
    Tanh,
    SmoothedRelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub gf_hidden: Vec<usize>,
    pub gu_hidden: Vec<usize>,
    pub gv_hidden: Vec<usize>,
    pub hidden_activation: HiddenKind,
    pub mode: Mode,
}

impl Default for Architecture {
    /// Three hidden layers of 100 (dynamics), 50 (controller) and 50
    /// (Lyapunov) units.
    fn default() -> Self {
        Architecture {
            gf_hidden: vec![100; 3],
            gu_hidden: vec![50; 3],
            gv_hidden: vec![50; 3],
            hidden_activation: HiddenKind::Tanh,
            mode: Mode::General,
        }
    }
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input).chain(hidden.iter().copied()).chain(std::iter::once(output)).collect()
}

/// Networks of the control-affine nominal model.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParts {
    /// `R^n → R^n`.
    pub gf1: Network,
    /// `R^n → R^{n×m}`, output row-major (`n` rows of `m`).
    pub gf2: Network,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dynamics {
    General { gf: Network, gu: Network },
    ControlAffine(AffineParts),
}

/// Everything the closed loop needs at a batch of states.
#[derive(Clone, Debug)]
pub struct StateEval {
    /// `u*(x)`, one row per state.
    pub control: Array2<f64>,
    pub v: Array1<f64>,
    pub grad_v: Array2<f64>,
    /// `f̂(x, u*(x))`.
    pub fhat: Array2<f64>,
    /// `∇Vᵀ f̂(x, u*(x)) + αV`, before the ReLU.
    pub residual: Array1<f64>,
    /// Row-wise `Δf`; `f*(x, u) = f̂(x, u) − Δf` for every `u`.
    pub correction: Array2<f64>,
}

impl StateEval {
    /// `f*(x, u*(x))`.
    pub fn closed_loop(&self) -> Array2<f64> {
        &self.fhat - &self.correction
    }
}

/// Terms evaluated at the origin that every evaluation subtracts.
#[derive(Clone, Debug)]
struct OriginTerms {
    /// `g_f(0, u*(0))`, or `g_f1(0) + f̂₂(0) u*(0)` in affine mode.
    shift: Array1<f64>,
    gv0: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoilsModel {
    pub dynamics: Dynamics,
    pub gv: Network,
    pub hyper: Hyper,
    /// When false the raw nominal model is used as the closed loop. Only
    /// meant for negative controls.
    pub projection_enabled: bool,
}

pub(crate) const NET_NAMES_GENERAL: [&str; 3] = ["gf", "gu", "gv"];
pub(crate) const NET_NAMES_AFFINE: [&str; 3] = ["gf1", "gf2", "gv"];

impl CoilsModel {
    pub fn new(dynamics: Dynamics, gv: Network, hyper: Hyper) -> Result<Self, ModelError> {
        hyper.validate()?;
        let (n, m) = (hyper.state_dim(), hyper.control_dim());
        let expect = |what, net: &Network, i: usize, o: usize| -> Result<(), ModelError> {
            if net.input_dim() != i {
                return Err(ModelError::Dimension { what, expected: i, got: net.input_dim() });
            }
            if net.output_dim() != o {
                return Err(ModelError::Dimension { what, expected: o, got: net.output_dim() });
            }
            Ok(())
        };
        match &dynamics {
            Dynamics::General { gf, gu } => {
                expect("g_f", gf, n + m, n)?;
                expect("g_u", gu, n, m)?;
            }
            Dynamics::ControlAffine(p) => {
                expect("g_f1", &p.gf1, n, n)?;
                expect("g_f2", &p.gf2, n, n * m)?;
            }
        }
        expect("g_V", &gv, n, 1)?;
        Ok(CoilsModel { dynamics, gv, hyper, projection_enabled: true })
    }

    /// Fresh model with the given architecture; all three networks draw their
    /// seeds from `seed`.
    pub fn init(arch: &Architecture, hyper: Hyper, seed: u64) -> Result<Self, ModelError> {
        hyper.validate()?;
        let (n, m) = (hyper.state_dim(), hyper.control_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || rng.next_u64();
        let hidden = match arch.hidden_activation {
            HiddenKind::Tanh => Activation::Tanh,
            HiddenKind::SmoothedRelu => Activation::smoothed_relu(hyper.d)?,
        };
        let (s1, s2, s3) = (next(), next(), next());
        let dynamics = match arch.mode {
            Mode::General => Dynamics::General {
                gf: Network::init(&dims(n + m, &arch.gf_hidden, n), hidden, Activation::Identity, s1)?,
                gu: Network::init(&dims(n, &arch.gu_hidden, m), hidden, Activation::Identity, s2)?,
            },
            Mode::ControlAffine => Dynamics::ControlAffine(AffineParts {
                gf1: Network::init(&dims(n, &arch.gf_hidden, n), hidden, Activation::Identity, s1)?,
                gf2: Network::init(&dims(n, &arch.gf_hidden, n * m), hidden, Activation::Identity, s2)?,
            }),
        };
        let gv = Network::init(&dims(n, &arch.gv_hidden, 1), Activation::smoothed_relu(hyper.d)?, Activation::Tanh, s3)?;
        CoilsModel::new(dynamics, gv, hyper)
    }

    pub fn mode(&self) -> Mode {
        match self.dynamics {
            Dynamics::General { .. } => Mode::General,
            Dynamics::ControlAffine(_) => Mode::ControlAffine,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.hyper.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.hyper.control_dim()
    }

    /// The three networks in parameter-layout order: `[g_f, g_u, g_V]` or
    /// `[g_f1, g_f2, g_V]`.
    pub fn networks(&self) -> [&Network; 3] {
        match &self.dynamics {
            Dynamics::General { gf, gu } => [gf, gu, &self.gv],
            Dynamics::ControlAffine(p) => [&p.gf1, &p.gf2, &self.gv],
        }
    }

    pub fn networks_mut(&mut self) -> [&mut Network; 3] {
        match &mut self.dynamics {
            Dynamics::General { gf, gu } => [gf, gu, &mut self.gv],
            Dynamics::ControlAffine(p) => [&mut p.gf1, &mut p.gf2, &mut self.gv],
        }
    }

    pub fn network_names(&self) -> [&'static str; 3] {
        match self.mode() {
            Mode::General => NET_NAMES_GENERAL,
            Mode::ControlAffine => NET_NAMES_AFFINE,
        }
    }

    pub fn param_count(&self) -> usize {
        self.networks().iter().map(|n| n.param_count()).sum()
    }

    fn check_states(&self, xs: &ArrayView2<f64>) -> Result<(), ModelError> {
        if xs.ncols() != self.state_dim() {
            return Err(ModelError::Dimension { what: "state", expected: self.state_dim(), got: xs.ncols() });
        }
        Ok(())
    }

    fn check_controls(&self, us: &ArrayView2<f64>, rows: usize) -> Result<(), ModelError> {
        if us.ncols() != self.control_dim() {
            return Err(ModelError::Dimension { what: "control", expected: self.control_dim(), got: us.ncols() });
        }
        if us.nrows() != rows {
            return Err(ModelError::Dimension { what: "control rows", expected: rows, got: us.nrows() });
        }
        Ok(())
    }

    fn zero_state(&self) -> Array2<f64> {
        Array2::zeros((1, self.state_dim()))
    }

    /// `v_cap · g_V(x)` and its input gradient, row-wise.
    fn gv_scaled(&self, xs: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>), ModelError> {
        let (v, g) = self.gv.value_and_input_gradient_batch(xs)?;
        let cap = self.hyper.v_cap;
        Ok((v.column(0).mapv(|t| cap * t), g * cap))
    }

    /// Raw Lyapunov network output `v_cap · g_V(x)` (the bounded network, not `V`).
    pub fn lyapunov_net_batch(&self, xs: ArrayView2<f64>) -> Result<Array1<f64>, ModelError> {
        self.check_states(&xs)?;
        let v = self.gv.forward_batch(xs)?;
        let cap = self.hyper.v_cap;
        Ok(v.column(0).mapv(|t| cap * t))
    }

    fn gv_origin(&self) -> Result<f64, ModelError> {
        Ok(self.lyapunov_net_batch(self.zero_state().view())?[0])
    }

    fn lyapunov_with(&self, xs: ArrayView2<f64>, gv0: f64) -> Result<(Array1<f64>, Array2<f64>), ModelError> {
        let (gvx, mut grad) = self.gv_scaled(xs)?;
        let sigma = Activation::SmoothedRelu { d: self.hyper.d };
        let eps = self.hyper.eps_pd;
        let mut v = Array1::zeros(xs.nrows());
        for (i, x) in xs.rows().into_iter().enumerate() {
            let s = gvx[i] - gv0;
            v[i] = sigma.apply(s) + eps * x.dot(&x);
            let slope = sigma.derivative(s);
            let mut row = grad.row_mut(i);
            row *= slope;
            row.scaled_add(2.0 * eps, &x);
        }
        Ok((v, grad))
    }

    /// `V(x) = σ(g_V(x) − g_V(0)) + ε_pd‖x‖²` and `∇V(x)`, row-wise.
    pub fn lyapunov_batch(&self, xs: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>), ModelError> {
        self.check_states(&xs)?;
        let gv0 = self.gv_origin()?;
        self.lyapunov_with(xs, gv0)
    }

    pub fn lyapunov(&self, x: ArrayView1<f64>) -> Result<f64, ModelError> {
        Ok(self.lyapunov_batch(x.insert_axis(Axis(0)))?.0[0])
    }

    pub fn lyapunov_grad(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, ModelError> {
        Ok(self.lyapunov_batch(x.insert_axis(Axis(0)))?.1.row(0).to_owned())
    }

    fn learned_controller(gu: &Network, u_lim: &[f64], xs: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        let mut u = gu.forward_batch(xs)?;
        for mut row in u.rows_mut() {
            for (c, lim) in row.iter_mut().zip(u_lim) {
                *c = lim * c.tanh();
            }
        }
        Ok(u)
    }

    fn bang_bang(&self, grad_v: &Array2<f64>, f2: &Array2<f64>) -> Array2<f64> {
        let (n, m) = (self.state_dim(), self.control_dim());
        let mut out = Array2::zeros((grad_v.nrows(), m));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let coef = Array1::from_shape_fn(m, |k| (0..n).map(|j| grad_v[[i, j]] * f2[[i, j * m + k]]).sum());
            row.assign(&bang_bang(coef.view(), &self.hyper.u_lim));
        }
        out
    }

    fn controller_with(&self, xs: ArrayView2<f64>, grad_v: Option<&Array2<f64>>, gv0: f64) -> Result<Array2<f64>, ModelError> {
        match &self.dynamics {
            Dynamics::General { gu, .. } => Self::learned_controller(gu, &self.hyper.u_lim, xs),
            Dynamics::ControlAffine(p) => {
                let owned;
                let grad_v = match grad_v {
                    Some(g) => g,
                    None => {
                        owned = self.lyapunov_with(xs, gv0)?.1;
                        &owned
                    }
                };
                let f2 = p.gf2.forward_batch(xs)?;
                Ok(self.bang_bang(grad_v, &f2))
            }
        }
    }

    fn origin_terms(&self) -> Result<OriginTerms, ModelError> {
        let zero = self.zero_state();
        let gv0 = self.gv_origin()?;
        let u0 = self.controller_with(zero.view(), None, gv0)?;
        let shift = match &self.dynamics {
            Dynamics::General { gf, .. } => {
                let input = concatenate(Axis(1), &[zero.view(), u0.view()]).expect("one row each");
                gf.forward_batch(input.view())?.row(0).to_owned()
            }
            Dynamics::ControlAffine(p) => {
                let f1 = p.gf1.forward_batch(zero.view())?;
                let f2 = p.gf2.forward_batch(zero.view())?;
                let m = self.control_dim();
                let f2u: Array1<f64> =
                    Array1::from_shape_fn(self.state_dim(), |j| (0..m).map(|k| f2[[0, j * m + k]] * u0[[0, k]]).sum());
                &f1.row(0) + &f2u
            }
        };
        Ok(OriginTerms { shift, gv0 })
    }

    fn nominal_with(&self, xs: ArrayView2<f64>, us: ArrayView2<f64>, origin: &OriginTerms) -> Result<Array2<f64>, ModelError> {
        let mut f = match &self.dynamics {
            Dynamics::General { gf, .. } => {
                let input = concatenate(Axis(1), &[xs, us]).expect("row counts checked");
                gf.forward_batch(input.view())?
            }
            Dynamics::ControlAffine(p) => {
                let mut f1 = p.gf1.forward_batch(xs)?;
                let f2 = p.gf2.forward_batch(xs)?;
                let m = self.control_dim();
                for (i, mut row) in f1.rows_mut().into_iter().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v += (0..m).map(|k| f2[[i, j * m + k]] * us[[i, k]]).sum::<f64>();
                    }
                }
                f1
            }
        };
        f -= &origin.shift;
        Ok(f)
    }

    /// Bounded controller `u*(x)`, row-wise.
    pub fn controller_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        self.check_states(&xs)?;
        let gv0 = match self.mode() {
            Mode::General => 0.0,
            Mode::ControlAffine => self.gv_origin()?,
        };
        self.controller_with(xs, None, gv0)
    }

    pub fn controller(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, ModelError> {
        Ok(self.controller_batch(x.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    /// Nominal model `f̂(x, u)`, shifted so that `f̂(0, u*(0)) = 0`.
    pub fn nominal_batch(&self, xs: ArrayView2<f64>, us: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        self.check_states(&xs)?;
        self.check_controls(&us, xs.nrows())?;
        let origin = self.origin_terms()?;
        self.nominal_with(xs, us, &origin)
    }

    pub fn nominal(&self, x: ArrayView1<f64>, u: ArrayView1<f64>) -> Result<Array1<f64>, ModelError> {
        Ok(self.nominal_batch(x.insert_axis(Axis(0)), u.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    /// Controller, Lyapunov values and the projection shift at every row.
    pub fn evaluate_batch(&self, xs: ArrayView2<f64>) -> Result<StateEval, ModelError> {
        self.check_states(&xs)?;
        let origin = self.origin_terms()?;
        self.evaluate_with(xs, &origin)
    }

    fn evaluate_with(&self, xs: ArrayView2<f64>, origin: &OriginTerms) -> Result<StateEval, ModelError> {
        let (v, grad_v) = self.lyapunov_with(xs, origin.gv0)?;
        let control = self.controller_with(xs, Some(&grad_v), origin.gv0)?;
        let fhat = self.nominal_with(xs, control.view(), origin)?;
        let alpha = self.hyper.alpha;
        let mut residual = Array1::zeros(xs.nrows());
        let mut correction = Array2::zeros(fhat.raw_dim());
        for i in 0..xs.nrows() {
            let (g, f) = (grad_v.row(i), fhat.row(i));
            residual[i] = decrease_residual(g, v[i], f, alpha);
            if self.projection_enabled {
                correction.row_mut(i).assign(&stability_correction(g, v[i], f, alpha, self.hyper.eps_proj));
            }
        }
        if residual.iter().chain(correction.iter()).any(|r| !r.is_finite()) {
            return Err(ModelError::NonFinite("stability projection"));
        }
        Ok(StateEval { control, v, grad_v, fhat, residual, correction })
    }

    /// Projected model `f*(x, u)`, row-wise.
    pub fn project_batch(&self, xs: ArrayView2<f64>, us: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        self.check_states(&xs)?;
        self.check_controls(&us, xs.nrows())?;
        let origin = self.origin_terms()?;
        let eval = self.evaluate_with(xs, &origin)?;
        let f = self.nominal_with(xs, us, &origin)? - &eval.correction;
        Ok(f)
    }

    pub fn project(&self, x: ArrayView1<f64>, u: ArrayView1<f64>) -> Result<Array1<f64>, ModelError> {
        Ok(self.project_batch(x.insert_axis(Axis(0)), u.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    /// `f*(x, u*(x))`, row-wise.
    pub fn closed_loop_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        Ok(self.evaluate_batch(xs)?.closed_loop())
    }

    pub fn closed_loop(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, ModelError> {
        Ok(self.closed_loop_batch(x.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    /// Evaluates the origin terms once, for many evaluations with the same
    /// parameters. Results are bit-identical to the unfrozen methods.
    pub fn freeze(&self) -> Result<Frozen<'_>, ModelError> {
        Ok(Frozen { model: self, origin: self.origin_terms()? })
    }

    /// The minimizer of `∇V(x)ᵀ f̂₂(x) u` over the input box.
    pub fn affine_controller(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, ModelError> {
        if self.mode() != Mode::ControlAffine {
            return Err(ModelError::NotAffine);
        }
        self.controller(x)
    }

    /// Nominal `f̂₁(x) + f̂₂(x) u` of the control-affine mode.
    pub fn affine_nominal(&self, x: ArrayView1<f64>, u: ArrayView1<f64>) -> Result<Array1<f64>, ModelError> {
        if self.mode() != Mode::ControlAffine {
            return Err(ModelError::NotAffine);
        }
        self.nominal(x, u)
    }

    /// `∇V(x)ᵀ f̂₂(x)` per row (affine mode), the coefficient the bang-bang
    /// controller takes the sign of.
    pub fn affine_coefficients(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        let Dynamics::ControlAffine(p) = &self.dynamics else {
            return Err(ModelError::NotAffine);
        };
        let (_, g) = self.lyapunov_batch(xs)?;
        let f2 = p.gf2.forward_batch(xs)?;
        let (n, m) = (self.state_dim(), self.control_dim());
        Ok(Array2::from_shape_fn((xs.nrows(), m), |(i, k)| (0..n).map(|j| g[[i, j]] * f2[[i, j * m + k]]).sum()))
    }

    /// Smallest distance, over every quantity with a kink, from a kink. Used
    /// to keep finite-difference checks away from points where the loss is
    /// not twice differentiable.
    pub fn min_seam_distance(&self, xs: ArrayView2<f64>, us: ArrayView2<f64>) -> Result<f64, ModelError> {
        self.check_states(&xs)?;
        self.check_controls(&us, xs.nrows())?;
        let zero = self.zero_state();
        let mut best = f64::INFINITY;
        let mut scan = |net: &Network, input: ArrayView2<f64>| -> Result<(), ModelError> {
            for (z, layer) in net.pre_activations_batch(input)?.iter().zip(net.layers()) {
                for &v in z {
                    best = best.min(layer.activation.seam_distance(v));
                }
            }
            Ok(())
        };
        let origin = self.origin_terms()?;
        let eval = self.evaluate_with(xs, &origin)?;
        // g_V(0) is subtracted from every V, so its kinks move with every
        // parameter. Zero biases put all of them exactly on a seam.
        scan(&self.gv, xs)?;
        scan(&self.gv, zero.view())?;
        match &self.dynamics {
            Dynamics::General { gf, gu } => {
                scan(gu, xs)?;
                scan(gu, zero.view())?;
                scan(gf, concatenate(Axis(1), &[xs, us]).expect("rows").view())?;
                scan(gf, concatenate(Axis(1), &[xs, eval.control.view()]).expect("rows").view())?;
            }
            Dynamics::ControlAffine(p) => {
                scan(&p.gf1, xs)?;
                scan(&p.gf2, xs)?;
                scan(&p.gf1, zero.view())?;
                scan(&p.gf2, zero.view())?;
            }
        }
        let sigma = Activation::SmoothedRelu { d: self.hyper.d };
        let gvx = self.lyapunov_net_batch(xs)?;
        for &g in &gvx {
            best = best.min(sigma.seam_distance(g - origin.gv0));
        }
        for (i, g) in eval.grad_v.rows().into_iter().enumerate() {
            best = best.min(eval.residual[i].abs());
            best = best.min((g.dot(&g) - self.hyper.eps_proj).abs());
        }
        if self.mode() == Mode::ControlAffine {
            for c in self.affine_coefficients(xs)? {
                best = best.min(c.abs());
            }
        }
        Ok(best)
    }
}

/// A model with its origin terms cached; see [`CoilsModel::freeze`].
#[derive(Debug)]
pub struct Frozen<'a> {
    model: &'a CoilsModel,
    origin: OriginTerms,
}

impl Frozen<'_> {
    pub fn evaluate_batch(&self, xs: ArrayView2<f64>) -> Result<StateEval, ModelError> {
        self.model.check_states(&xs)?;
        self.model.evaluate_with(xs, &self.origin)
    }

    pub fn closed_loop_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        Ok(self.evaluate_batch(xs)?.closed_loop())
    }

    pub fn controller_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>, ModelError> {
        self.model.check_states(&xs)?;
        self.model.controller_with(xs, None, self.origin.gv0)
    }

    pub fn lyapunov_batch(&self, xs: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>), ModelError> {
        self.model.check_states(&xs)?;
        self.model.lyapunov_with(xs, self.origin.gv0)
    }
}

/// Minimizer of `cᵀu` over the box `|u⁽ᵏ⁾| ≤ u_lim⁽ᵏ⁾`:
/// `u⁽ᵏ⁾ = −sign(c⁽ᵏ⁾) u_lim⁽ᵏ⁾`, with `sign(0) = 0`.
///
/// ```
/// use coils::models::bang_bang;
/// use ndarray::array;
/// assert_eq!(bang_bang(array![1.0, -2.0].view(), &[5.0, 5.0]), array![-5.0, 5.0]);
/// ```
pub fn bang_bang(coef: ArrayView1<f64>, u_lim: &[f64]) -> Array1<f64> {
    Array1::from_shape_fn(coef.len(), |k| {
        let c = coef[k];
        let sign = if c > 0.0 {
            1.0
        } else if c < 0.0 {
            -1.0
        } else {
            0.0
        };
        -sign * u_lim[k]
    })
}

/// Evenly spaced grid node `i` of `count` between `lo` and `hi`, exact at
/// both ends and at the midpoint of a symmetric range.
pub(crate) fn lerp_node(lo: f64, hi: f64, i: usize, count: usize) -> f64 {
    if count < 2 {
        return lo;
    }
    let t = i as f64 / (count - 1) as f64;
    lo * (1.0 - t) + hi * t
}
