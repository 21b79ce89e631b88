// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! fails.

mod common;

use attnedit::calibration::{calibrate, debias_once, CalibrationConfig, LayerPatterns};
use attnedit::editors::{
    max_learning_rate, mist_closed_form, mist_gradient, stable_learning_rate, time_edit, uce_edit, EditConfig,
    EditPair, Ridge, DEFAULT_LEARNING_RATE,
};
use attnedit::metrics::{
    average_pixel_shift, biasedness, ratio_deviation, AttributeSpec, Image, ImagePair, RatioReport,
};
use attnedit::oracle::SyntheticOracle;
use attnedit::tensor_store::{
    extract_cross_attention, patch_layers, read_container, Dtype, NamedTensorMap, DEFAULT_KEY_PATTERN,
    DEFAULT_VALUE_PATTERN,
};
use common::{gaussian, rng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::time::Instant;

const REFERENCE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/reference.safetensors");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Gaussian `d × l` deltas with columns of roughly unit norm.
fn unit_scale_deltas(r: &mut rand_chacha::ChaCha8Rng, d: usize, l: usize) -> DMatrix<f64> {
    gaussian(r, d, l) / (d as f64).sqrt()
}

fn gradient_agreement() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1001);
    let mut worst = 0.0f64;
    let mut default_lr_stable = 0;
    for i in 0..100 {
        let m = r.random_range(1..=32);
        let d = r.random_range(1..=32);
        let l = r.random_range(1..=8);
        let lambda = [0.1, 1.0 / l as f64, 1.0][i % 3];
        let w_old = gaussian(&mut r, m, d);
        let deltas = unit_scale_deltas(&mut r, d, l);
        if DEFAULT_LEARNING_RATE < max_learning_rate(&deltas, lambda) {
            default_lr_stable += 1;
        }
        let config = EditConfig {
            lambda,
            learning_rate: stable_learning_rate(&deltas, lambda),
            max_steps: 1_000_000,
            grad_tolerance: 1e-9 * w_old.norm(),
            ..EditConfig::default()
        };
        let closed = match mist_closed_form(&w_old, &deltas, lambda) {
            Ok(c) => c.w_star,
            Err(e) => return outcome(false, format!("instance {i}: closed form failed: {e}")),
        };
        let grad = match mist_gradient(&w_old, &deltas, &config) {
            Ok(g) => g.w_star,
            Err(e) => return outcome(false, format!("instance {i}: gradient failed: {e}")),
        };
        worst = worst.max(rel(&grad, &closed));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-5 && secs < 10.0,
        format!(
            "max rel err {worst:.2e} (tol 1e-5), {secs:.2} s (limit 10 s); lr 0.5 would be stable on {default_lr_stable}/100"
        ),
    )
}

/// Unit vector orthogonal to every column of `deltas`.
fn orthogonal_probe(deltas: &DMatrix<f64>, r: &mut rand_chacha::ChaCha8Rng) -> DVector<f64> {
    let x = gaussian(r, deltas.nrows(), 1).column(0).into_owned();
    let q = deltas.clone().qr().q();
    let basis = q.columns(0, deltas.ncols());
    let c = &x - basis * (basis.transpose() * &x);
    c.normalize()
}

fn exact_preservation() -> Outcome {
    let mut r = rng(1002);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d = r.random_range(4..=32);
        let l = r.random_range(1..d.min(9));
        let m = r.random_range(1..=32);
        let lambda = [0.1, 1.0 / l as f64, 1.0][r.random_range(0..3)];
        let w_old = gaussian(&mut r, m, d);
        let deltas = unit_scale_deltas(&mut r, d, l);
        let w = mist_closed_form(&w_old, &deltas, lambda).unwrap().w_star;
        for _ in 0..4 {
            let c = orthogonal_probe(&deltas, &mut r);
            let base = &w_old * &c;
            worst = worst.max((&w * &c - &base).norm() / base.norm());
        }
    }
    outcome(
        worst <= 1e-5,
        format!("max rel change {worst:.2e} over 200 probes (tol 1e-5)"),
    )
}

fn single_delta_shrinkage() -> Outcome {
    let mut r = rng(1003);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let m = r.random_range(1..=32);
        let d = r.random_range(1..=32);
        let lambda = r.random_range(0.05..2.0);
        let w_old = gaussian(&mut r, m, d);
        let delta = gaussian(&mut r, d, 1) * r.random_range(0.1..3.0);
        let w = mist_closed_form(&w_old, &delta, lambda).unwrap().w_star;
        let measured = (&w * &delta).norm() / (&w_old * &delta).norm();
        let expected = lambda / (delta.norm_squared() + lambda);
        worst = worst.max((measured - expected).abs());
    }
    outcome(
        worst <= 1e-6,
        format!("max |measured - predicted| {worst:.2e} (tol 1e-6)"),
    )
}

/// `∇ [Σ ‖W c − v‖² + μ ‖W − W_old‖² + Σ_p ‖(W − W_old) p‖²]`, from scratch.
fn regularized_gradient(
    w: &DMatrix<f64>,
    w_old: &DMatrix<f64>,
    pairs: &[(DVector<f64>, DVector<f64>)],
    mu: f64,
    preserve: &[DVector<f64>],
) -> DMatrix<f64> {
    let mut g = (w - w_old) * (2.0 * mu);
    for (c, v) in pairs {
        g += (w * c - v) * c.transpose() * 2.0;
    }
    for p in preserve {
        g += (w - w_old) * p * p.transpose() * 2.0;
    }
    g
}

fn time_uce_stationarity() -> Outcome {
    let mut r = rng(1004);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let m = r.random_range(1..=16);
        let d = r.random_range(1..=16);
        let l = r.random_range(1..=8);
        let lambda = r.random_range(0.05..2.0);
        let w_old = gaussian(&mut r, m, d);
        let raw: Vec<_> = (0..l)
            .map(|_| {
                (
                    gaussian(&mut r, d, 1).column(0).into_owned(),
                    gaussian(&mut r, m, 1).column(0).into_owned(),
                )
            })
            .collect();
        let pairs: Vec<_> = raw.iter().map(|(c, v)| EditPair::new(c.clone(), v.clone())).collect();
        let t = time_edit(&w_old, &pairs, lambda, None).unwrap();
        let g = regularized_gradient(&t.w_star, &w_old, &raw, lambda, &[]);
        worst = worst.max(g.norm() / t.w_star.norm());

        let preserve: Vec<_> = (0..r.random_range(0..=d))
            .map(|_| gaussian(&mut r, d, 1).column(0).into_owned())
            .collect();
        let u = uce_edit(&w_old, &pairs, &preserve, Ridge::Auto).unwrap();
        let g = regularized_gradient(&u.w_star, &w_old, &raw, u.ridge_epsilon, &preserve);
        worst = worst.max(g.norm() / u.w_star.norm());
    }

    let w_old = gaussian(&mut r, 12, 10);
    let spanning: Vec<_> = (0..10)
        .map(|_| gaussian(&mut r, 10, 1).column(0).into_owned())
        .collect();
    let span_err = match uce_edit(&w_old, &[], &spanning, Ridge::Fixed(0.0)) {
        Ok(u) => rel(&u.w_star, &w_old),
        Err(e) => return outcome(false, format!("spanning UCE failed: {e}")),
    };
    outcome(
        worst <= 1e-6 && span_err <= 1e-6,
        format!("max ‖∇‖/‖W‖ {worst:.2e} (tol 1e-6); spanning UCE rel diff {span_err:.2e} (tol 1e-6)"),
    )
}

fn metric_arithmetic() -> Outcome {
    let g = AttributeSpec::gender();
    let report = |c: &[u64]| RatioReport::from_counts(g.clone(), c.to_vec()).unwrap();
    let full = biasedness(&report(&[100, 0]), 0).unwrap();
    let table = biasedness(&report(&[37, 63]), 0).unwrap();

    // ξ against a longhand reference on random count pairs.
    let mut r = rng(1005);
    let raw: Vec<(u64, u64, u64, u64)> = (0..40)
        .map(|_| {
            (
                r.random_range(1..200),
                r.random_range(0..200),
                r.random_range(1..200),
                r.random_range(0..200),
            )
        })
        .collect();
    let pairs: Vec<_> = raw
        .iter()
        .map(|&(a, b, c, d)| (report(&[a, b]), report(&[c, d])))
        .collect();
    let signed = |x: u64, y: u64| (0.5 - x as f64 / (x + y) as f64) / 0.5;
    let xi_ref = raw
        .iter()
        .map(|&(a, b, c, d)| (signed(a, b) - signed(c, d)).abs())
        .sum::<f64>()
        / raw.len() as f64;
    let xi_err = (ratio_deviation(&pairs, 0).unwrap() - xi_ref).abs();

    // APS against a brute-force per-pixel reference.
    let shape = [8, 8, 3];
    let n: usize = shape.iter().product();
    let raw_images: Vec<(Vec<f32>, Vec<f32>)> = (0..6)
        .map(|_| {
            (
                (0..n).map(|_| r.random_range(0.0f32..255.0)).collect(),
                (0..n).map(|_| r.random_range(0.0f32..255.0)).collect(),
            )
        })
        .collect();
    let mut aps_ref = 0.0;
    for (a, b) in &raw_images {
        let mut sq = 0.0f64;
        for k in 0..n {
            sq += (f64::from(a[k]) - f64::from(b[k])).powi(2);
        }
        aps_ref += sq.sqrt();
    }
    aps_ref /= raw_images.len() as f64;
    let image_pairs: Vec<_> = raw_images
        .iter()
        .enumerate()
        .map(|(i, (a, b))| ImagePair {
            baseline: Image::new(shape, a.clone()).unwrap(),
            edited: Image::new(shape, b.clone()).unwrap(),
            seed: i as u64,
        })
        .collect();
    let aps_err = (average_pixel_shift(&image_pairs).unwrap() - aps_ref).abs() / aps_ref;

    outcome(
        full == 1.0 && (table - 0.26).abs() <= 1e-12 && xi_err <= 1e-12 && aps_err <= 1e-12,
        format!(
            "psi(100,0) = {full}, |psi(37,63) - 0.26| = {:.1e}, xi err {xi_err:.1e}, APS rel err {aps_err:.1e}",
            (table - 0.26).abs()
        ),
    )
}

fn synthetic_closed_loop() -> Outcome {
    let start = Instant::now();
    let ckpt = common::toy_checkpoint(Dtype::F32, 1);
    let deltas = common::random_deltas(8, 2, 10.0, 6);
    let mut config = CalibrationConfig::for_deltas(&deltas);
    config.edit.learning_rate = stable_learning_rate(&deltas.to_f64(), config.edit.lambda);
    let run = || {
        let mut oracle = SyntheticOracle::new(3.0, 2).unwrap();
        calibrate(&ckpt, &deltas, &AttributeSpec::gender(), &mut oracle, &config)
    };
    let (first_map, first) = match run() {
        Ok(done) => done,
        Err(e) => return outcome(false, format!("calibrate failed: {e}")),
    };
    let (second_map, second) = run().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let monotone = first
        .iterations
        .windows(2)
        .all(|w| w[1].response_norm <= w[0].response_norm);
    let deterministic = first == second && first_map == second_map;
    let last = first.iterations.last().map_or(f64::NAN, |i| i.worst_psi);
    // Informational: convergence depends on the fixed binomial noise draw.
    let sweep = (0..40u64)
        .filter(|&seed| {
            let mut oracle = SyntheticOracle::new(3.0, seed).unwrap();
            calibrate(&ckpt, &deltas, &AttributeSpec::gender(), &mut oracle, &config).is_ok_and(|(_, r)| r.converged)
        })
        .count();
    outcome(
        first.converged && first.iterations.len() <= 50 && monotone && deterministic && secs < 5.0,
        format!(
            "converged {} in {} iteration(s), worst psi {last:.3}, monotone response {monotone}, deterministic {deterministic}, {secs:.2} s (limit 5 s); noise seeds 0..40 converging: {sweep}/40",
            first.converged,
            first.iterations.len()
        ),
    )
}

fn container_fidelity() -> Outcome {
    let bytes = std::fs::read(REFERENCE).unwrap();
    let map = NamedTensorMap::from_bytes(&bytes).unwrap();
    let identical = map.to_bytes().unwrap() == bytes;
    let mut layer = extract_cross_attention(&map, DEFAULT_KEY_PATTERN, DEFAULT_VALUE_PATTERN)
        .unwrap()
        .remove(0);
    layer.key *= 0.5;
    layer.value *= -1.0;
    let patched = patch_layers(&map, &[layer]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("patched.safetensors");
    attnedit::tensor_store::write_container(&patched, &path).unwrap();
    let reread = read_container(&path).unwrap();
    let changed = map
        .iter()
        .filter(|(name, entry)| reread.get(name).is_none_or(|e| e.data != entry.data))
        .count();
    outcome(
        identical && changed == 2 && reread.len() == map.len(),
        format!("read/write byte-identical {identical}; payloads changed by one-layer patch: {changed} (want 2)"),
    )
}

fn huge_lambda_limit() -> Outcome {
    let mut worst = Vec::new();
    for (dtype, eps) in [(Dtype::F32, f32::EPSILON), (Dtype::F16, half::f16::EPSILON.to_f32())] {
        let ckpt = common::toy_checkpoint(dtype, 11);
        let deltas = common::random_deltas(8, 4, 2.0, 12);
        let config = EditConfig {
            lambda: 1e8,
            ..EditConfig::default()
        };
        let out = debias_once(&ckpt, &deltas, &config, &LayerPatterns::default()).unwrap();
        // Rounding unit of the dtype, at the scale of each tensor.
        let mut ratio = 0.0f32;
        for (name, entry) in ckpt.iter() {
            let a = entry.to_f32();
            let b = out.get(name).unwrap().to_f32();
            let scale = a.iter().fold(0.0f32, |s, v| s.max(v.abs()));
            ratio = ratio.max(common::max_abs_diff(&a, &b) / (eps * scale));
        }
        worst.push((dtype, ratio));
    }
    outcome(
        worst.iter().all(|&(_, r)| r <= 1.0),
        format!(
            "max change in rounding units: {}",
            worst
                .iter()
                .map(|(d, r)| format!("{} {r:.3}", d.as_str()))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

type Check = fn() -> Outcome;

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("closed-form/gradient agreement", gradient_agreement),
        ("exact preservation", exact_preservation),
        ("single-delta shrinkage", single_delta_shrinkage),
        ("TIME and UCE stationarity", time_uce_stationarity),
        ("metric arithmetic", metric_arithmetic),
        ("synthetic closed loop", synthetic_closed_loop),
        ("container fidelity", container_fidelity),
        ("lambda -> infinity limit", huge_lambda_limit),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
