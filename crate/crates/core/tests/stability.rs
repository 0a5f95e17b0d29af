//! Stability properties that hold for every parameter value, exercised
//! through the public API on randomly initialized models.

use coils::models::{Architecture, CoilsModel, HiddenKind, Hyper, Mode};
use coils::sim::{random_starts, rollout_batch, Plant, RolloutOptions, RolloutStatus};
use coils::systems::System;
use coils::verify::{check_decrease, decay_bound_check};
use ndarray::{array, Array2};
use proptest::prelude::*;

fn small(mode: Mode, hidden: HiddenKind) -> Architecture {
    Architecture { gf_hidden: vec![24, 24], gu_hidden: vec![12], gv_hidden: vec![16, 16], hidden_activation: hidden, mode }
}

fn model(system: &str, mode: Mode, hidden: HiddenKind, seed: u64) -> CoilsModel {
    let s: System = system.parse().unwrap();
    CoilsModel::init(&small(mode, hidden), Hyper::for_system(&s.bounds()), seed).unwrap()
}

fn any_model() -> impl Strategy<Value = CoilsModel> {
    (
        prop::sample::select(vec!["vdp", "pendulum", "bicycle"]),
        prop::sample::select(vec![Mode::General, Mode::ControlAffine]),
        prop::sample::select(vec![HiddenKind::Tanh, HiddenKind::SmoothedRelu]),
        any::<u64>(),
    )
        .prop_map(|(s, m, h, seed)| model(s, m, h, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn origin_is_an_exact_equilibrium(m in any_model()) {
        let zero = array![0.0, 0.0];
        prop_assert_eq!(m.lyapunov(zero.view()).unwrap(), 0.0);
        prop_assert_eq!(m.closed_loop(zero.view()).unwrap(), array![0.0, 0.0]);
    }

    #[test]
    fn lyapunov_dominates_its_quadratic_floor(m in any_model(), a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let h = &m.hyper;
        let x = array![a * h.x_ub[0], b * h.x_ub[1]];
        prop_assert!(m.lyapunov(x.view()).unwrap() >= h.eps_pd * x.dot(&x));
    }

    #[test]
    fn closed_loop_decreases_lyapunov_at_rate_alpha(m in any_model(), seed in any::<u64>()) {
        let r = check_decrease(&m, 500, seed).unwrap();
        prop_assert!(r.passes(1e-9), "max residual {:?}", r.max_residual);
    }

    #[test]
    fn controller_respects_the_input_box(m in any_model(), a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let x = array![a * 4.0, b * 4.0];
        let u = m.controller(x.view()).unwrap();
        prop_assert!(u.iter().zip(&m.hyper.u_lim).all(|(u, l)| u.abs() <= *l));
    }
}

#[test]
fn frozen_evaluation_is_bit_identical() {
    for mode in [Mode::General, Mode::ControlAffine] {
        let m = model("pendulum", mode, HiddenKind::Tanh, 11);
        let xs = random_starts(&m, 17, 3);
        let frozen = m.freeze().unwrap();
        assert_eq!(frozen.closed_loop_batch(xs.view()).unwrap(), m.closed_loop_batch(xs.view()).unwrap());
        assert_eq!(frozen.controller_batch(xs.view()).unwrap(), m.controller_batch(xs.view()).unwrap());
        assert_eq!(frozen.lyapunov_batch(xs.view()).unwrap(), m.lyapunov_batch(xs.view()).unwrap());
    }
}

#[test]
fn learned_rollouts_stay_inside_the_decay_envelope() {
    let opts = RolloutOptions { horizon: 3.0, step: 1e-3 };
    for (i, s) in ["vdp", "pendulum", "bicycle"].iter().enumerate() {
        let m = model(s, Mode::General, HiddenKind::Tanh, 100 + i as u64);
        let xs = random_starts(&m, 8, i as u64);
        for t in rollout_batch(Plant::Learned, &m, xs.view(), &opts).unwrap() {
            assert_eq!(t.status, RolloutStatus::Completed);
            let r = decay_bound_check(&t, &m.hyper);
            assert!(r.passed, "{s}: {r:?}");
            assert!(t.v.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        }
    }
}

#[test]
fn ablated_model_violates_the_decrease_condition() {
    let mut m = model("vdp", Mode::General, HiddenKind::Tanh, 5);
    m.projection_enabled = false;
    let r = check_decrease(&m, 5_000, 0).unwrap();
    assert!(r.max_residual.unwrap() > 0.0);
    assert!(!r.projection_enabled);
}

#[test]
fn true_plant_rollout_reports_bicycle_singularity() {
    let m = model("bicycle", Mode::General, HiddenKind::Tanh, 2);
    // d_e = 1 is the singular line; start just below it with a long horizon.
    let xs = Array2::from_shape_vec((1, 2), vec![0.999_999, 0.0]).unwrap();
    let s: System = "bicycle".parse().unwrap();
    let opts = RolloutOptions { horizon: 1.0, step: 1e-2 };
    let t = rollout_batch(Plant::True(s), &m, xs.view(), &opts).unwrap().pop().unwrap();
    assert!(matches!(t.status, RolloutStatus::Singular { .. }), "{:?}", t.status);
}
