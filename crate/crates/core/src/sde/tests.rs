use super::*;
use crate::model::{drift_fraction, t_lambda, t_prime};

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

fn zero_noise_error(h0: f64) -> f64 {
    let params = ModelParams::with_grid(2.0, vec![1, 2, 4, 8]).unwrap();
    let policy = StepPolicy::for_params(&params)
        .with_h0(h0)
        .with_refine_c(1.0)
        .with_out_stride(10);
    let e = integrate_ensemble(&params, &policy, &derive_stream(3, 0).silent()).unwrap();
    let mut worst: f64 = 0.0;
    for (k, &t) in e.times.iter().enumerate() {
        let h = if t <= policy.t_end { drift_fraction(t, 2.0) } else { drift_fraction(policy.t_end, 2.0) };
        for (i, &l) in e.signed.iter().enumerate() {
            worst = worst.max((e.frames[k][i] - l * h).abs() / l.abs());
        }
    }
    worst
}

#[test]
fn starts_at_zero_and_is_deterministic() {
    let params = ModelParams::full_grid(2.0, 6).unwrap();
    let policy = StepPolicy::for_params(&params);
    let a = integrate_ensemble(&params, &policy, &derive_stream(9, 4)).unwrap();
    let b = integrate_ensemble(&params, &policy, &derive_stream(9, 4)).unwrap();
    assert!(a.frames[0].iter().all(|&x| x == 0.0));
    assert_eq!(a, b);
    assert_eq!(a.times[0], 0.0);
    assert!(a.times.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(a.signed, vec![-6.0, -5.0, -4.0, -3.0, -2.0, -1.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn single_lambda_deterministic() {
    let params = ModelParams::with_grid(2.0, vec![1]).unwrap();
    let policy = StepPolicy::for_params(&params).with_h0(0.02);
    let a = integrate_ensemble(&params, &policy, &derive_stream(17, 0)).unwrap();
    let b = integrate_ensemble(&params, &policy, &derive_stream(17, 0)).unwrap();
    assert_eq!(a.frames, b.frames);
}

#[test]
fn zero_noise_matches_ode_and_is_first_order() {
    let e1 = zero_noise_error(0.02);
    let e2 = zero_noise_error(0.01);
    // left-point rule: error ≤ (h0/2)·max 𝔣 = h0·β/8 per unit λ
    assert!(e1 <= 0.25 * 0.02 * 1.05, "error {e1}");
    let ratio = e1 / e2;
    assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
}

#[test]
fn zero_noise_terminal_large_lambda() {
    let params = ModelParams::with_grid(2.0, vec![64]).unwrap();
    let policy = StepPolicy::for_params(&params);
    let e = integrate_ensemble(&params, &policy, &derive_stream(3, 0).silent()).unwrap();
    let exact = 64.0 * drift_fraction(policy.t_end, 2.0);
    let err = (e.terminal()[1] - exact).abs();
    assert!(err <= 0.25 * policy.h0 * 64.0 + 0.25 * policy.refine_c * 64.0, "err {err}");
    assert!(e.violations.iter().all(|&v| v == 0));
    assert!(e.converged.iter().all(|&c| c) || e.terminal_difference(0) != 0.0);
}

#[test]
fn rejects_short_horizon_and_bad_policy() {
    let params = ModelParams::full_grid(2.0, 64).unwrap();
    let policy = StepPolicy::until(2.0, 64.0, 1.0);
    assert!(matches!(
        integrate_ensemble(&params, &policy, &derive_stream(1, 1)),
        Err(SdeError::HorizonTooShort { .. })
    ));
    let bad = StepPolicy::for_params(&params).with_h0(-1.0);
    assert!(matches!(
        integrate_ensemble(&params, &bad, &derive_stream(1, 1)),
        Err(SdeError::InvalidPolicy(_))
    ));
}

#[test]
fn non_finite_state_reports_step() {
    let params = ModelParams::with_grid(2.0, vec![1, 2]).unwrap();
    let policy = StepPolicy::for_params(&params);
    let e = integrate_ensemble(&params, &policy, &derive_stream(1, 0).scaled(f64::INFINITY));
    match e {
        Err(SdeError::NonFinite { step, .. }) => assert!(step > 0),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn mean_difference_centered_at_two_lambda() {
    let params = ModelParams::with_grid(2.0, vec![32]).unwrap();
    let policy = StepPolicy::for_params(&params).with_out_stride(0);
    let turns: Vec<f64> = (0..2000)
        .map(|r| {
            let e = integrate_ensemble(&params, &policy, &derive_stream(2024, r)).unwrap();
            e.terminal_difference(0) / (2.0 * std::f64::consts::PI)
        })
        .collect();
    let (m, se) = mean_se(&turns);
    let target = 32.0 / std::f64::consts::PI;
    assert!((m - target).abs() <= 3.0 * se, "mean {m} target {target} se {se}");
}

#[test]
fn order_preserved_and_improves_with_refinement() {
    let params = ModelParams::full_grid(2.0, 16).unwrap();
    let frac = |h0: f64, c: f64| {
        let policy = StepPolicy::for_params(&params).with_h0(h0).with_refine_c(c).with_out_stride(5);
        let mut total = 0.0;
        for r in 0..40 {
            let e = integrate_ensemble(&params, &policy, &derive_stream(77, r)).unwrap();
            total += e.order_violation_fraction(1e-3);
        }
        total / 40.0
    };
    let coarse = frac(DEFAULT_H0 * 4.0, DEFAULT_REFINE_C * 4.0);
    let default = frac(DEFAULT_H0, DEFAULT_REFINE_C);
    assert!(default < 0.01, "default fraction {default}");
    assert!(default <= coarse, "default {default} coarse {coarse}");
}

#[test]
fn barrier_violations_drop_under_refinement() {
    let params = ModelParams::with_grid(2.0, vec![1, 2, 4, 8]).unwrap();
    let count = |h0: f64| {
        let policy = StepPolicy::for_params(&params).with_h0(h0).with_refine_c(10.0).with_out_stride(0);
        (0..200)
            .map(|r| {
                let e = integrate_ensemble(&params, &policy, &derive_stream(5, r)).unwrap();
                e.violations.iter().map(|&v| v as u64).sum::<u64>()
            })
            .sum::<u64>()
    };
    let coarse = count(0.2);
    let fine = count(0.02);
    assert!(coarse > 0, "coarse run shows no violations");
    assert!(fine < coarse, "fine {fine} coarse {coarse}");
}

/// Terminal max-|Δα| between a run at step `h0` and the same Brownian path
/// integrated at 1e-5 (each coarse increment is the sum of the fine ones).
fn strong_errors(h0: f64, seeds: u64) -> Vec<f64> {
    // T_7 < 4 keeps the horizon precondition; T_8 would not.
    let params = ModelParams::with_grid(2.0, vec![1, 2, 4, 7]).unwrap();
    let sub = (h0 / 1e-5).round() as u32;
    let mut policy = StepPolicy::until(2.0, 7.0, 4.0).with_h0(h0).with_out_stride(0);
    policy.substeps = sub;
    let mut errs: Vec<f64> = (0..seeds)
        .map(|r| {
            let noise = derive_stream(31, r);
            let coarse = integrate_ensemble_observed(&params, &policy, &noise, 1, &mut ()).unwrap();
            let fine = integrate_ensemble_observed(&params, &policy, &noise, sub, &mut ()).unwrap();
            coarse
                .terminal()
                .iter()
                .zip(fine.terminal())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    errs
}

#[test]
fn fine_step_oracle_by_increment_aggregation() {
    // Euler–Maruyama has strong order 1/2 here (the two noise fields do not
    // commute), so the pathwise error shrinks like √h rather than vanishing.
    let e3 = strong_errors(1e-3, 200);
    let e4 = strong_errors(1e-4, 200);
    let rms = |e: &[f64]| (e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64).sqrt();
    let (median3, median4) = (e3[100], e4[100]);
    assert!(median3 < 0.2, "median error at h0=1e-3: {median3}");
    assert!(median3 / median4 > 2.5, "median ratio {}", median3 / median4);
    assert!(rms(&e3) / rms(&e4) > 2.5, "rms ratio {}", rms(&e3) / rms(&e4));
}

#[test]
fn replay_reproduces_pair() {
    let params = ModelParams::full_grid(2.0, 12).unwrap();
    let policy = StepPolicy::for_params(&params).with_out_stride(7);
    let noise = derive_stream(8, 2);
    let e = integrate_ensemble(&params, &policy, &noise).unwrap();
    let (p, m) = replay_pair(&e, &noise, 5, &mut ()).unwrap();
    let gi = e.grid_index(5).unwrap();
    assert_eq!(p, e.terminal()[e.pos_index(gi)]);
    assert_eq!(m, e.terminal()[e.neg_index(gi)]);
    assert!(matches!(
        replay_pair(&e, &derive_stream(8, 3), 5, &mut ()),
        Err(SdeError::ReplayMismatch(_))
    ));
    assert!(matches!(replay_pair(&e, &noise, 13, &mut ()), Err(SdeError::UnknownLambda(_))));
}

#[test]
fn portable_and_vector_kernels_agree_bitwise() {
    let lambdas: Vec<f64> = (-40..=40).filter(|&l| l != 0).map(|l| l as f64 * 3.7).collect();
    let mut a = PhaseKernel::new(lambdas.clone());
    let mut b = PhaseKernel::new(lambdas);
    let mut s = derive_stream(4, 4);
    for k in 0..5000 {
        let (d1, d2) = s.increment(0.01, 1);
        let drift = model::decay_rate(k as f64 * 0.01, 2.0) * 0.01;
        a.advance(drift, d1, d2);
        b.advance_portable(drift, d1, d2);
    }
    assert_eq!(a.alpha, b.alpha);
    assert_eq!(a.violations, b.violations);
}

#[test]
fn path_dump_columns() {
    let params = ModelParams::full_grid(2.0, 2).unwrap();
    let policy = StepPolicy::for_params(&params).with_out_stride(50);
    let e = integrate_ensemble(&params, &policy, &derive_stream(1, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("paths.csv");
    e.write_paths_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,-2,-1,1,2");
    assert_eq!(lines.count(), e.times.len());
}

#[test]
fn tilted_zero_noise_ode() {
    let lambda = 16.0;
    let policy = StepPolicy::until(2.0, lambda, 6.0).with_out_stride(10);
    let p = integrate_tilted(lambda, 0.0, 2.0, &policy, &derive_stream(1, 0).silent()).unwrap();
    for (t, u) in p.times.iter().zip(&p.u) {
        let exact = 2.0 * lambda * drift_fraction(*t, 2.0);
        assert!((u - exact).abs() <= 0.25 * (policy.h0 + policy.refine_c) * 2.0 * lambda);
    }
    assert!(p.m_part.iter().all(|&m| m == 0.0));
}

#[test]
fn tilted_bracket_bounds() {
    let policy = StepPolicy::until(2.0, 8.0, 5.0).with_out_stride(1);
    let p = integrate_tilted(8.0, 1.0, 2.0, &policy, &derive_stream(2, 5)).unwrap();
    assert_eq!(p.u[0], 0.0);
    for k in 1..p.times.len() {
        let dt = p.times[k] - p.times[k - 1];
        let db = p.bracket[k] - p.bracket[k - 1];
        assert!(db >= 0.0 && db <= 4.0 * dt + 1e-12);
    }
}

fn ks_distance(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn untilted_difference_matches_two_phase_simulation() {
    let lambda = 8u32;
    let t = t_lambda(lambda as f64, 2.0).unwrap();
    let params = ModelParams::with_grid(2.0, vec![lambda]).unwrap();
    let policy = StepPolicy::until(2.0, lambda as f64, t).with_out_stride(0);
    let n = 2000;
    let direct: Vec<f64> = (0..n)
        .map(|r| integrate_ensemble(&params, &policy, &derive_stream(10, r)).unwrap().terminal_difference(0))
        .collect();
    let tilted: Vec<f64> = (0..n)
        .map(|r| {
            *integrate_tilted(lambda as f64, 0.0, 2.0, &policy, &derive_stream(11, r))
                .unwrap()
                .u
                .last()
                .unwrap()
        })
        .collect();
    let d = ks_distance(direct, tilted);
    assert!(d < 3.0 / (n as f64).sqrt(), "KS distance {d}");
}

#[test]
fn tilted_martingale_drifts_at_root_beta() {
    let beta: f64 = 2.0;
    let lambda = 55.0;
    let tp = t_prime(lambda, beta, 1.0).unwrap();
    let policy = StepPolicy::until(beta, lambda, tp).with_out_stride(0);
    let slopes: Vec<f64> = (0..2000)
        .map(|r| {
            let p = integrate_tilted(lambda, beta.sqrt(), beta, &policy, &derive_stream(12, r)).unwrap();
            p.terminal_martingale() / p.final_time()
        })
        .collect();
    let (m, _) = mean_se(&slopes);
    assert!((m - beta.sqrt()).abs() <= 0.2, "mean slope {m}");
}
