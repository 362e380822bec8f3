use super::*;
use crate::model::{drift_fraction, t_lambda};

// Independent oracle: substitute v = H(s), ds = 4 dv / (β(1 − v)), and
// apply composite Simpson in v.
fn covariance_oracle(l: f64, m: f64, t: f64, beta: f64) -> f64 {
    let top = drift_fraction(t, beta);
    let n = 200_000;
    let dv = top / n as f64;
    let f = |v: f64| 16.0 * (l * v).sin() * (m * v).sin() / (beta * (1.0 - v));
    let mut acc = f(0.0) + f(top);
    for k in 1..n {
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * dv);
    }
    acc * dv / 3.0
}

#[test]
fn covariance_trivial_cases() {
    assert_eq!(g_covariance(0.0, 5.0, 3.0, 2.0).unwrap(), 0.0);
    assert_eq!(g_covariance(5.0, 0.0, 3.0, 2.0).unwrap(), 0.0);
    assert_eq!(g_covariance(5.0, 7.0, 0.0, 2.0).unwrap(), 0.0);
    assert_eq!(
        g_covariance(13.0, 40.0, 5.5, 2.0).unwrap(),
        g_covariance(40.0, 13.0, 5.5, 2.0).unwrap()
    );
    assert!(g_covariance(1.0, 1.0, -1.0, 2.0).is_err());
    assert!(g_covariance(1.0, 1.0, 1.0, 0.0).is_err());
}

#[test]
fn covariance_matches_substitution_oracle() {
    for &(l, m, beta) in &[(55.0f64, 55.0, 2.0), (7.0, 30.0, 1.0), (200.0, 201.0, 4.0), (64.0, 3.0, 2.0)] {
        let t = t_lambda(l.min(m), beta).unwrap();
        let q = g_covariance(l, m, t, beta).unwrap();
        let o = covariance_oracle(l, m, t, beta);
        assert!((q - o).abs() <= 1e-7 * o.abs().max(1.0), "{l} {m} {beta}: {q} vs {o}");
    }
}

#[test]
fn diagonal_near_two_t() {
    let t = t_lambda(55.0, 2.0).unwrap();
    let v = g_covariance(55.0, 55.0, t, 2.0).unwrap();
    assert!((v - 2.0 * t).abs() <= 2.0, "{v}");
    assert!(v >= 0.0 && v <= 4.0 * t);
}

#[test]
fn covariance_cauchy_schwarz() {
    for &(l, m) in &[(10.0, 11.0), (10.0, 300.0), (1.0, 2.0)] {
        let t = 6.0;
        let c = g_covariance(l, m, t, 2.0).unwrap();
        let a = g_covariance(l, l, t, 2.0).unwrap();
        let b = g_covariance(m, m, t, 2.0).unwrap();
        assert!(c.abs() <= (a * b).sqrt() + 1e-12);
    }
}

fn field(grid: Vec<u32>, seed: u64) -> (GaussianFieldSample, ModelParams, StepPolicy) {
    let params = ModelParams::with_grid(2.0, grid).unwrap();
    let t = t_lambda(params.lambda_max(), 2.0).unwrap();
    let policy = StepPolicy::until(2.0, params.lambda_max(), t);
    let s = simulate_field(&params, &policy, &derive_stream(seed, 0)).unwrap();
    (s, params, policy)
}

#[test]
fn lambda_one_is_zero_and_deterministic() {
    let (a, _, _) = field(vec![1, 5, 9], 3);
    let (b, _, _) = field(vec![1, 5, 9], 3);
    assert_eq!(a, b);
    assert_eq!(a.values[0], 0.0);
    assert_eq!(a.max_up_to(1), Some(0.0));
    assert!(a.values.iter().all(|v| v.is_finite()));
}

#[test]
fn field_is_linear_in_increments() {
    let (a, params, policy) = field(vec![2, 8, 30], 5);
    let doubled = simulate_field(&params, &policy, &derive_stream(5, 0).scaled(2.0)).unwrap();
    for (x, y) in a.values.iter().zip(&doubled.values) {
        assert_eq!(2.0 * x, *y);
    }
}

#[test]
fn short_horizon_rejected() {
    let params = ModelParams::with_grid(2.0, vec![100]).unwrap();
    let policy = StepPolicy::until(2.0, 100.0, 1.0);
    assert!(simulate_field(&params, &policy, &derive_stream(0, 0)).is_err());
}

#[test]
fn marginal_variance_matches_quadrature() {
    let params = ModelParams::with_grid(2.0, vec![55]).unwrap();
    let t = t_lambda(55.0, 2.0).unwrap();
    let policy = StepPolicy::until(2.0, 55.0, t);
    let vals: Vec<f64> = (0..4000)
        .map(|r| simulate_field(&params, &policy, &derive_stream(11, r)).unwrap().values[0])
        .collect();
    let (var, se) = stats::variance_se(&vals);
    let exact = g_covariance(55.0, 55.0, t, 2.0).unwrap();
    assert!((var - exact).abs() <= 3.0 * se, "{var} ± {se} vs {exact}");
}

#[test]
fn trivial_diagnostic_and_centering() {
    let d = gaussian_max_diagnostic(1, 2.0, 3, 0).unwrap();
    assert_eq!(d.mean_max, 0.0);
    assert_eq!(d.centering, 0.0);
    assert!((model::max_centering(1024.0, 4.0) - 10.95).abs() < 0.01);
}
