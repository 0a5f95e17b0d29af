use ndarray::ArrayView1;

use super::{Dataset, TrainError};
use crate::diffcore::{NodeId, Tape};
use crate::models::CoilsModel;

/// Control-similarity weight `1 + exp(−β‖u − u'‖²)`, in `(1, 2]`.
///
/// ```
/// use coils::training::kernel;
/// use ndarray::array;
/// assert_eq!(kernel(array![1.0].view(), array![1.0].view(), 3.0), 2.0);
/// let half = kernel(array![0.0].view(), array![2f64.ln().sqrt()].view(), 1.0);
/// assert!((half - 1.5).abs() < 1e-15);
/// ```
pub fn kernel(u: ArrayView1<f64>, uprime: ArrayView1<f64>, beta: f64) -> f64 {
    let d2: f64 = u.iter().zip(uprime).map(|(a, b)| (a - b) * (a - b)).sum();
    1.0 + (-beta * d2).exp()
}

/// Records the regression loss on `batch`:
/// the kernel-weighted mean of `‖ẋ − f*(x, u)‖²` plus `λ‖θ‖²`.
///
/// The kernel compares each sample's input with `u*(x)`, and the gradient
/// flows through that comparison as well, pulling the controller towards
/// inputs whose effect the model fits well.
pub fn record_loss(model: &CoilsModel, tape: &mut Tape, batch: &Dataset) -> Result<NodeId, TrainError> {
    if batch.is_empty() {
        return Err(crate::training::DatasetError::Empty.into());
    }
    let r = model.record(tape, batch.states.view(), batch.inputs.view())?;
    let u = tape.input(batch.inputs.clone());
    let du = tape.sub(u, r.control);
    let dist = tape.row_sum_sq(du);
    let scaled = tape.scale(dist, -model.hyper.beta);
    let e = tape.exp(scaled);
    let k = tape.add_const(e, 1.0);
    let xdot = tape.input(batch.derivs.clone());
    let resid = tape.sub(xdot, r.fstar);
    let err = tape.row_sum_sq(resid);
    let weighted = tape.mul(k, err);
    let total = tape.sum(weighted);
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    let reg = tape.param_sum_sq();
    let reg = tape.scale(reg, model.hyper.lambda);
    Ok(tape.add(mean, reg))
}

/// Loss value and its gradient in parameter-layout order.
pub fn loss_and_gradient(model: &CoilsModel, batch: &Dataset) -> Result<(f64, Vec<f64>), TrainError> {
    let mut tape = model.tape();
    let out = record_loss(model, &mut tape, batch)?;
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss);
    }
    let grad = tape.param_gradient(out)?;
    Ok((value, grad))
}

pub fn loss_value(model: &CoilsModel, batch: &Dataset) -> Result<f64, TrainError> {
    let mut tape = model.tape();
    let out = record_loss(model, &mut tape, batch)?;
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(TrainError::NonFiniteLoss);
    }
    Ok(value)
}

/// Loss over all of `data`, evaluated in chunks of `chunk` rows and
/// recombined with the exact per-chunk weights.
pub fn dataset_loss(model: &CoilsModel, data: &Dataset, chunk: usize) -> Result<f64, TrainError> {
    let chunk = chunk.max(1);
    let reg = model.hyper.lambda * crate::diffcore::ParamVector::gather(&model.networks()).norm_sq();
    let mut acc = 0.0;
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk).min(data.len());
        let rows: Vec<usize> = (start..end).collect();
        let part = data.select(&rows);
        let v = loss_value(model, &part)? - reg;
        acc += v * (end - start) as f64;
        start = end;
    }
    Ok(acc / data.len() as f64 + reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, Hyper};
    use crate::systems::System;
    use ndarray::{array, Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_range_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100_000 {
            let u = Array1::from_shape_fn(2, |_| rng.random_range(-5.0..5.0));
            let v = Array1::from_shape_fn(2, |_| rng.random_range(-5.0..5.0));
            let k = kernel(u.view(), v.view(), 1.0);
            // The exponential stays positive; adding it to 1 rounds to 1
            // once it drops below half an ulp.
            let d2 = (&u - &v).mapv(|t| t * t).sum();
            assert!((-d2).exp() > 0.0);
            assert!((1.0..=2.0).contains(&k));
            assert!(k > 1.0 || (-d2).exp() < f64::EPSILON);
        }
        let at = |t: f64| kernel(array![0.0].view(), array![t].view(), 0.7);
        let mut prev = at(0.0);
        assert_eq!(prev, 2.0);
        for i in 1..120 {
            let k = at(i as f64 * 0.05);
            assert!(k < prev);
            prev = k;
        }
        assert_eq!(at(1e3), 1.0);
    }

    fn tiny_model() -> CoilsModel {
        let s: System = "vdp".parse().unwrap();
        let arch = Architecture { gf_hidden: vec![6], gu_hidden: vec![4], gv_hidden: vec![5], ..Default::default() };
        CoilsModel::init(&arch, Hyper::for_system(&s.bounds()), 3).unwrap()
    }

    #[test]
    fn hand_substituted_single_sample() {
        let m = tiny_model();
        let x = array![[0.4, -0.2]];
        let u = m.controller_batch(x.view()).unwrap();
        let f = m.project_batch(x.view(), u.view()).unwrap();
        // Target 0.3 and 0.4 away from f*: residual norm 0.5, k = 2.
        let xdot = &f + &array![[0.3, 0.4]];
        let batch = Dataset::new(x, u, xdot).unwrap();
        let l = loss_value(&m, &batch).unwrap();
        assert!((l - 0.5).abs() < 1e-12, "{l}");
    }

    #[test]
    fn zero_residual_zero_loss() {
        let m = tiny_model();
        let x = array![[0.1, 0.2], [-1.0, 0.7]];
        let u = array![[1.0], [-3.0]];
        let mut tape = m.tape();
        let r = m.record(&mut tape, x.view(), u.view()).unwrap();
        let f = tape.value(r.fstar).clone();
        let batch = Dataset::new(x, u, f).unwrap();
        assert_eq!(loss_value(&m, &batch).unwrap(), 0.0);
    }

    #[test]
    fn regularizer_enters_with_lambda() {
        let mut m = tiny_model();
        let x = array![[0.1, 0.2]];
        let u = array![[1.0]];
        let batch = Dataset::new(x.clone(), u.clone(), Array2::zeros((1, 2))).unwrap();
        let base = loss_value(&m, &batch).unwrap();
        m.hyper.lambda = 0.5;
        let theta = crate::diffcore::ParamVector::gather(&m.networks());
        let with = loss_value(&m, &batch).unwrap();
        assert!((with - base - 0.5 * theta.norm_sq()).abs() < 1e-10);
    }

    #[test]
    fn chunked_dataset_loss_matches_single_batch() {
        let m = tiny_model();
        let s: System = "vdp".parse().unwrap();
        let d = super::super::sample_dataset(&s, &m.hyper, 103, 1).unwrap();
        let whole = loss_value(&m, &d).unwrap();
        let chunked = dataset_loss(&m, &d, 10).unwrap();
        assert!((whole - chunked).abs() <= 1e-12 * whole);
    }
}
