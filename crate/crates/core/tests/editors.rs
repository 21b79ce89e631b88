// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use approx::assert_relative_eq;
use attnedit::editors::{
    mist_closed_form, mist_gradient, mist_gradient_at, mist_objective, stable_learning_rate, time_edit, time_gradient,
    toy_cross_attention, uce_edit, uce_gradient, EditConfig, EditPair, MistDescent, Ridge,
};
use attnedit::Error;
use common::{gaussian, rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Independent closed form through the `L × L` system:
/// `W* = W_old − W_old Δ (ΔᵀΔ + λ I)⁻¹ Δᵀ`.
fn woodbury(w_old: &DMatrix<f64>, deltas: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let l = deltas.ncols();
    let small = deltas.transpose() * deltas + DMatrix::identity(l, l) * lambda;
    let inv = small.try_inverse().expect("SPD");
    w_old - w_old * deltas * inv * deltas.transpose()
}

/// Random vector orthogonal to every column of `deltas`.
fn orthogonal_probe(deltas: &DMatrix<f64>, seed: u64) -> DVector<f64> {
    let mut r = rng(seed);
    let x = gaussian(&mut r, deltas.nrows(), 1).column(0).into_owned();
    let q = deltas.clone().qr().q();
    let basis = q.columns(0, deltas.ncols().min(deltas.nrows()));
    &x - basis * (basis.transpose() * &x)
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

#[test]
fn two_by_two_known_answer() {
    // W_old = I, Δ = e₁, λ = 1: the e₁ column halves, e₂ is untouched.
    let w_old = DMatrix::<f64>::identity(2, 2);
    let deltas = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    let r = mist_closed_form(&w_old, &deltas, 1.0).unwrap();
    assert_relative_eq!(
        r.w_star,
        DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0]),
        epsilon = 1e-14
    );
    assert_relative_eq!(r.w_star, woodbury(&w_old, &deltas, 1.0), epsilon = 1e-14);
}

#[test]
fn gradient_is_derivative_of_objective() {
    let mut r = rng(3);
    let (w_old, deltas) = (gaussian(&mut r, 5, 7), gaussian(&mut r, 7, 3));
    let w = gaussian(&mut r, 5, 7);
    let g = mist_gradient_at(&w, &w_old, &deltas, 0.3);
    let h = 1e-6;
    for i in 0..5 {
        for j in 0..7 {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[(i, j)] += h;
            minus[(i, j)] -= h;
            let fd = (mist_objective(&plus, &w_old, &deltas, 0.3) - mist_objective(&minus, &w_old, &deltas, 0.3))
                / (2.0 * h);
            assert_relative_eq!(g[(i, j)], fd, epsilon = 1e-6, max_relative = 1e-6);
        }
    }
}

#[test]
fn closed_form_is_stationary() {
    let mut r = rng(4);
    let (w_old, deltas) = (gaussian(&mut r, 6, 9), gaussian(&mut r, 9, 4));
    let res = mist_closed_form(&w_old, &deltas, 0.25).unwrap();
    assert!(res.gradient_norm <= 1e-9 * res.w_star.norm());
    assert_relative_eq!(res.objective_value, mist_objective(&res.w_star, &w_old, &deltas, 0.25));
}

#[test]
fn divergent_learning_rate_reports_bound() {
    let mut r = rng(5);
    let (w_old, deltas) = (gaussian(&mut r, 4, 4), gaussian(&mut r, 4, 2) * 3.0);
    let config = EditConfig {
        lambda: 0.5,
        learning_rate: 0.5,
        ..EditConfig::default()
    };
    match mist_gradient(&w_old, &deltas, &config) {
        Err(Error::Divergence { suggested, .. }) => {
            assert_relative_eq!(
                suggested,
                2.0 * stable_learning_rate(&deltas, 0.5),
                max_relative = 1e-12
            );
            assert!(suggested < 0.5);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn descent_objective_never_rises_at_safe_rate() {
    let mut r = rng(6);
    let (w_old, deltas) = (gaussian(&mut r, 5, 6), gaussian(&mut r, 6, 3));
    let lr = 1.9 / (1.0 / stable_learning_rate(&deltas, 0.4));
    let mut d = MistDescent::new(&w_old, &deltas, 0.4, lr).unwrap();
    let mut last = d.objective();
    for _ in 0..200 {
        d.step().unwrap();
        assert!(d.objective() <= last * (1.0 + 1e-12));
        last = d.objective();
    }
}

#[test]
fn time_reaches_targets_as_lambda_vanishes() {
    let mut r = rng(7);
    let w_old = gaussian(&mut r, 4, 6);
    let pairs: Vec<_> = (0..3)
        .map(|_| {
            EditPair::new(
                gaussian(&mut r, 6, 1).column(0).into_owned(),
                gaussian(&mut r, 4, 1).column(0).into_owned(),
            )
        })
        .collect();
    let res = time_edit(&w_old, &pairs, 1e-9, None).unwrap();
    for p in &pairs {
        assert_relative_eq!(&res.w_star * &p.input, p.target.clone(), epsilon = 1e-6);
    }
}

#[test]
fn uce_spanning_preservation_returns_w_old() {
    let mut r = rng(8);
    let w_old = gaussian(&mut r, 5, 6);
    let preserve: Vec<_> = (0..6).map(|_| gaussian(&mut r, 6, 1).column(0).into_owned()).collect();
    let res = uce_edit(&w_old, &[], &preserve, Ridge::Fixed(0.0)).unwrap();
    assert!(rel(&res.w_star, &w_old) <= 1e-10);
}

#[test]
fn uce_unridged_singular_system_is_reported() {
    let w_old = DMatrix::<f64>::identity(3, 3);
    let preserve = vec![DVector::from_column_slice(&[1.0, 0.0, 0.0])];
    assert!(matches!(
        uce_edit(&w_old, &[], &preserve, Ridge::Fixed(0.0)),
        Err(Error::Singular(_))
    ));
    // The automatic ridge keeps unconstrained directions at W_old.
    let res = uce_edit(&w_old, &[], &preserve, Ridge::Auto).unwrap();
    assert_relative_eq!(res.w_star, w_old, epsilon = 1e-12);
}

#[test]
fn attention_output_unchanged_for_orthogonal_text() {
    let mut r = rng(9);
    let (m, d) = (4, 10);
    let queries = gaussian(&mut r, m, 3);
    let w_k = gaussian(&mut r, m, d);
    let w_v = gaussian(&mut r, m, d);
    let deltas = gaussian(&mut r, d, 2);
    let k_star = mist_closed_form(&w_k, &deltas, 0.5).unwrap().w_star;
    let v_star = mist_closed_form(&w_v, &deltas, 0.5).unwrap().w_star;
    let text = DMatrix::from_columns(&[orthogonal_probe(&deltas, 1), orthogonal_probe(&deltas, 2)]);
    let before = toy_cross_attention(&queries, &w_k, &w_v, &text).unwrap();
    let after = toy_cross_attention(&queries, &k_star, &v_star, &text).unwrap();
    assert_relative_eq!(before.output, after.output, epsilon = 1e-10);

    // Text along a delta is moved.
    let along = DMatrix::from_columns(&[deltas.column(0).into_owned(), orthogonal_probe(&deltas, 3)]);
    let before = toy_cross_attention(&queries, &w_k, &w_v, &along).unwrap();
    let after = toy_cross_attention(&queries, &k_star, &v_star, &along).unwrap();
    assert!((before.output - after.output).norm() > 1e-3);
}

fn instance() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..12, 1usize..12, 1usize..6, any::<u64>())
}

proptest! {
    #![proptest_config(common::proptest_config(48))]

    #[test]
    fn closed_form_matches_woodbury((m, d, l, seed) in instance(), lambda in 0.05f64..5.0) {
        let mut r = rng(seed);
        let (w_old, deltas) = (gaussian(&mut r, m, d), gaussian(&mut r, d, l));
        let got = mist_closed_form(&w_old, &deltas, lambda).unwrap().w_star;
        prop_assert!(rel(&got, &woodbury(&w_old, &deltas, lambda)) < 1e-10);
    }

    #[test]
    fn orthogonal_probes_are_preserved((m, d, l, seed) in instance(), lambda in 0.05f64..5.0) {
        prop_assume!(l < d);
        let mut r = rng(seed);
        let (w_old, deltas) = (gaussian(&mut r, m, d), gaussian(&mut r, d, l));
        let w = mist_closed_form(&w_old, &deltas, lambda).unwrap().w_star;
        let c = orthogonal_probe(&deltas, seed ^ 1);
        let base = &w_old * &c;
        prop_assume!(base.norm() > 1e-8);
        prop_assert!((&w * &c - &base).norm() / base.norm() <= 1e-10);
    }

    #[test]
    fn single_delta_shrinkage((m, d, _l, seed) in instance(), lambda in 0.05f64..5.0, scale in 0.1f64..4.0) {
        let mut r = rng(seed);
        let w_old = gaussian(&mut r, m, d);
        let delta = gaussian(&mut r, d, 1) * scale;
        let w = mist_closed_form(&w_old, &delta, lambda).unwrap().w_star;
        let expected = lambda / (delta.norm_squared() + lambda);
        prop_assert!(((&w * &delta).norm() / (&w_old * &delta).norm() - expected).abs() < 1e-10);
    }

    #[test]
    fn response_grows_with_lambda((m, d, l, seed) in instance(), lambda in 0.05f64..5.0) {
        let mut r = rng(seed);
        let (w_old, deltas) = (gaussian(&mut r, m, d), gaussian(&mut r, d, l));
        let small = mist_closed_form(&w_old, &deltas, lambda).unwrap().delta_response_norm;
        let large = mist_closed_form(&w_old, &deltas, 2.0 * lambda).unwrap().delta_response_norm;
        prop_assert!(small <= large * (1.0 + 1e-12));
        prop_assert!(large <= (&w_old * &deltas).norm() * (1.0 + 1e-12));
    }

    #[test]
    fn huge_lambda_keeps_w_old((m, d, l, seed) in instance()) {
        let mut r = rng(seed);
        let (w_old, deltas) = (gaussian(&mut r, m, d), gaussian(&mut r, d, l));
        let w = mist_closed_form(&w_old, &deltas, 1e8).unwrap().w_star;
        prop_assert!(rel(&w, &w_old) <= 1e-6);
    }

    #[test]
    fn column_order_is_irrelevant((m, d, l, seed) in instance(), lambda in 0.05f64..5.0) {
        let mut r = rng(seed);
        let (w_old, deltas) = (gaussian(&mut r, m, d), gaussian(&mut r, d, l));
        let reversed = DMatrix::from_columns(&deltas.column_iter().rev().map(|c| c.into_owned()).collect::<Vec<_>>());
        let a = mist_closed_form(&w_old, &deltas, lambda).unwrap().w_star;
        let b = mist_closed_form(&w_old, &reversed, lambda).unwrap().w_star;
        prop_assert!(rel(&a, &b) < 1e-12);
    }

    #[test]
    fn gradient_solver_agrees((m, d, l, seed) in instance(), lambda in 0.1f64..2.0) {
        let mut r = rng(seed);
        let w_old = gaussian(&mut r, m, d);
        let deltas = gaussian(&mut r, d, l);
        let config = EditConfig {
            lambda,
            learning_rate: stable_learning_rate(&deltas, lambda),
            max_steps: 200_000,
            grad_tolerance: 1e-11,
            ..EditConfig::default()
        };
        let grad = mist_gradient(&w_old, &deltas, &config).unwrap().w_star;
        let closed = mist_closed_form(&w_old, &deltas, lambda).unwrap().w_star;
        prop_assert!(rel(&grad, &closed) < 1e-8);
    }

    #[test]
    fn time_and_uce_are_stationary((m, d, l, seed) in instance(), lambda in 0.05f64..5.0) {
        let mut r = rng(seed);
        let w_old = gaussian(&mut r, m, d);
        let pairs: Vec<_> = (0..l)
            .map(|_| EditPair::new(gaussian(&mut r, d, 1).column(0).into_owned(), gaussian(&mut r, m, 1).column(0).into_owned()))
            .collect();
        let t = time_edit(&w_old, &pairs, lambda, None).unwrap();
        prop_assert!(time_gradient(&t.w_star, &w_old, &pairs, lambda).norm() <= 1e-9 * t.w_star.norm());

        let preserve: Vec<_> = (0..l).map(|_| gaussian(&mut r, d, 1).column(0).into_owned()).collect();
        let u = uce_edit(&w_old, &pairs, &preserve, Ridge::Auto).unwrap();
        let g = uce_gradient(&u.w_star, &w_old, &pairs, &preserve, u.ridge_epsilon);
        prop_assert!(g.norm() <= 1e-9 * u.w_star.norm().max(1.0));
    }
}
