//! The projected model recorded as a differentiable graph.

use ndarray::{Array1, Array2, ArrayView2};

use super::{CoilsModel, Dynamics, ModelError};
use crate::diffcore::{Activation, NodeId, Tape};

/// Nodes of one recorded batch. Every node has one row per sample.
#[derive(Clone, Copy, Debug)]
pub struct RecordedBatch {
    /// `u*(x)`.
    pub control: NodeId,
    /// `V(x)`, a column.
    pub v: NodeId,
    pub grad_v: NodeId,
    /// `f̂(x, u)` at the supplied inputs.
    pub fhat: NodeId,
    /// `f*(x, u)` at the supplied inputs.
    pub fstar: NodeId,
}

const GF: usize = 0;
const GU: usize = 1;
const GV: usize = 2;

impl CoilsModel {
    /// A tape over the model's networks in layout order.
    pub fn tape(&self) -> Tape<'_> {
        Tape::new(&self.networks())
    }

    /// `(V, ∇V)` at the rows of `x`.
    fn record_lyapunov(&self, tape: &mut Tape, x: NodeId, xs: &Array2<f64>, gv0: NodeId) -> Result<(NodeId, NodeId), ModelError> {
        let cap = self.hyper.v_cap;
        let eps = self.hyper.eps_pd;
        let sigma = Activation::SmoothedRelu { d: self.hyper.d };
        let (raw, raw_grad) = tape.value_and_input_gradient(GV, x)?;
        let gvx = tape.scale(raw, cap);
        let dgv = tape.scale(raw_grad, cap);
        let gv0 = tape.broadcast_rows(gv0, xs.nrows());
        let shifted = tape.sub(gvx, gv0);
        let s = tape.act(sigma, shifted);
        let slope = tape.act_deriv(sigma, shifted);
        let quad = tape.input(xs.map_axis(ndarray::Axis(1), |r| eps * r.dot(&r)).insert_axis(ndarray::Axis(1)));
        let v = tape.add(s, quad);
        let scaled = tape.mul_rows(dgv, slope);
        let lin = tape.input(xs * (2.0 * eps));
        let grad = tape.add(scaled, lin);
        Ok((v, grad))
    }

    fn record_bang_bang(&self, tape: &mut Tape, grad_v: NodeId, f2: NodeId) -> NodeId {
        let coef = tape.row_vec_mat(grad_v, f2);
        let sign = tape.sign(coef);
        tape.scale_cols(sign, Array1::from(self.hyper.u_lim.clone()).mapv(|u| -u))
    }

    /// Records `u*`, `V`, `∇V`, `f̂(x, u)` and `f*(x, u)` at the rows of `xs`
    /// and `us`.
    pub fn record(&self, tape: &mut Tape, xs: ArrayView2<f64>, us: ArrayView2<f64>) -> Result<RecordedBatch, ModelError> {
        self.check_states(&xs)?;
        self.check_controls(&us, xs.nrows())?;
        let rows = xs.nrows();
        let xs = xs.to_owned();
        let zeros = self.zero_state();
        let zero = tape.input(zeros.clone());
        let x = tape.input(xs.clone());
        let u = tape.input(us.to_owned());
        let u_lim = Array1::from(self.hyper.u_lim.clone());

        let gv0_raw = tape.forward(GV, zero);
        let gv0 = tape.scale(gv0_raw, self.hyper.v_cap);
        let (v, grad_v) = self.record_lyapunov(tape, x, &xs, gv0)?;

        let (control, fhat, fhat_cl) = match self.dynamics {
            Dynamics::General { .. } => {
                let squash = |tape: &mut Tape, at: NodeId| {
                    let raw = tape.forward(GU, at);
                    let t = tape.tanh(raw);
                    tape.scale_cols(t, u_lim.clone())
                };
                let u0 = squash(tape, zero);
                let control = squash(tape, x);
                let origin_in = tape.concat(zero, u0);
                let shift = tape.forward(GF, origin_in);
                let shift = tape.broadcast_rows(shift, rows);
                let data_in = tape.concat(x, u);
                let f_data = tape.forward(GF, data_in);
                let fhat = tape.sub(f_data, shift);
                let cl_in = tape.concat(x, control);
                let f_cl = tape.forward(GF, cl_in);
                let fhat_cl = tape.sub(f_cl, shift);
                (control, fhat, fhat_cl)
            }
            Dynamics::ControlAffine(_) => {
                let (_, grad_v0) = self.record_lyapunov(tape, zero, &zeros, gv0)?;
                let f2_0 = tape.forward(GU, zero);
                let u0 = self.record_bang_bang(tape, grad_v0, f2_0);
                let f1_0 = tape.forward(GF, zero);
                let f2u0 = tape.row_mat_vec(f2_0, u0);
                let shift = tape.add(f1_0, f2u0);
                let shift = tape.broadcast_rows(shift, rows);
                let f2 = tape.forward(GU, x);
                let control = self.record_bang_bang(tape, grad_v, f2);
                let f1_raw = tape.forward(GF, x);
                let f1 = tape.sub(f1_raw, shift);
                let f2u = tape.row_mat_vec(f2, u);
                let fhat = tape.add(f1, f2u);
                let f2c = tape.row_mat_vec(f2, control);
                let fhat_cl = tape.add(f1, f2c);
                (control, fhat, fhat_cl)
            }
        };

        let fstar = if self.projection_enabled {
            let flow = tape.row_dot(grad_v, fhat_cl);
            let decay = tape.scale(v, self.hyper.alpha);
            let residual = tape.add(flow, decay);
            let active = tape.relu(residual);
            let norm = tape.row_sum_sq(grad_v);
            let denom = tape.max_const(norm, self.hyper.eps_proj);
            let coef = tape.div(active, denom);
            let correction = tape.mul_rows(grad_v, coef);
            tape.sub(fhat, correction)
        } else {
            fhat
        };
        Ok(RecordedBatch { control, v, grad_v, fhat, fstar })
    }
}
