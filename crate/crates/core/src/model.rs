//! Closed-form scalar functions of the stochastic sine equation.
//!
//! Every other module evaluates the drift, the decay clock 𝔣(t), the
//! drift-integral fraction H(t) and the cutoff times through this module.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("x_max must be at least 1")]
    EmptyRange,
    #[error("lambda grid must be strictly increasing within [1, {x_max}]")]
    InvalidGrid { x_max: u32 },
    #[error("{name} must be finite, got {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("{name} must be nonnegative, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("lambda must be at least 1 for cutoff times, got {0}")]
    LambdaBelowOne(f64),
    #[error("R must be positive, got {0}")]
    InvalidRadius(f64),
}

/// Model constants: β, the range [1, x_max] and the integer λ grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: f64,
    pub x_max: u32,
    pub lambda_grid: Vec<u32>,
}

impl ModelParams {
    pub fn new(beta: f64, x_max: u32, lambda_grid: Vec<u32>) -> Result<Self, ModelError> {
        let params = Self {
            beta,
            x_max,
            lambda_grid,
        };
        params.validate()?;
        Ok(params)
    }

    /// Every integer in `1..=x_max`.
    pub fn full_grid(beta: f64, x_max: u32) -> Result<Self, ModelError> {
        Self::new(beta, x_max, (1..=x_max).collect())
    }

    /// A sparse grid; `x_max` is its largest entry.
    pub fn with_grid(beta: f64, lambda_grid: Vec<u32>) -> Result<Self, ModelError> {
        let x_max = lambda_grid.last().copied().unwrap_or(0);
        Self::new(beta, x_max, lambda_grid)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_beta(self.beta)?;
        if self.x_max < 1 {
            return Err(ModelError::EmptyRange);
        }
        let ok = !self.lambda_grid.is_empty()
            && self.lambda_grid.windows(2).all(|w| w[0] < w[1])
            && self.lambda_grid[0] >= 1
            && *self.lambda_grid.last().unwrap() <= self.x_max;
        if !ok {
            return Err(ModelError::InvalidGrid { x_max: self.x_max });
        }
        Ok(())
    }

    pub fn lambda_max(&self) -> f64 {
        *self.lambda_grid.last().unwrap_or(&0) as f64
    }
}

/// 𝔣(t) and H(t) evaluated at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockValue {
    pub t: f64,
    pub f_t: f64,
    pub h_t: f64,
}

impl ClockValue {
    pub fn at(t: f64, beta: f64) -> Result<Self, ModelError> {
        check_beta(beta)?;
        check_time(t)?;
        Ok(Self {
            t,
            f_t: decay_rate(t, beta),
            h_t: drift_fraction(t, beta),
        })
    }
}

fn check_beta(beta: f64) -> Result<(), ModelError> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(ModelError::InvalidBeta(beta))
    }
}

fn check_finite(name: &'static str, value: f64) -> Result<(), ModelError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite { name, value })
    }
}

fn check_time(t: f64) -> Result<(), ModelError> {
    check_finite("t", t)?;
    if t < 0.0 {
        return Err(ModelError::Negative { name: "t", value: t });
    }
    Ok(())
}

/// 𝔣(t) = (β/4)·e^{−βt/4}. Unchecked; used in hot loops.
#[inline]
pub fn decay_rate(t: f64, beta: f64) -> f64 {
    0.25 * beta * libm::exp(-0.25 * beta * t)
}

/// H(t) = 1 − e^{−βt/4} = ∫₀ᵗ 𝔣. Unchecked.
#[inline]
pub fn drift_fraction(t: f64, beta: f64) -> f64 {
    -libm::expm1(-0.25 * beta * t)
}

/// Drift of α_λ: λ·𝔣(t).
pub fn drift_rate(lambda: f64, t: f64, beta: f64) -> Result<f64, ModelError> {
    check_finite("lambda", lambda)?;
    check_time(t)?;
    check_beta(beta)?;
    Ok(lambda * decay_rate(t, beta))
}

/// T_λ = (4/β) ln λ.
pub fn t_lambda(lambda: f64, beta: f64) -> Result<f64, ModelError> {
    check_finite("lambda", lambda)?;
    check_beta(beta)?;
    if lambda < 1.0 {
        return Err(ModelError::LambdaBelowOne(lambda));
    }
    Ok(4.0 / beta * lambda.ln())
}

/// T'_λ = max(0, T_λ − R²·√(ln λ)).
pub fn t_prime(lambda: f64, beta: f64, r: f64) -> Result<f64, ModelError> {
    check_finite("R", r)?;
    if r <= 0.0 {
        return Err(ModelError::InvalidRadius(r));
    }
    let t = t_lambda(lambda, beta)?;
    Ok((t - r * r * lambda.ln().sqrt()).max(0.0))
}

/// `(cos α − 1, sin α)`: the real-form coefficients of `Re[(e^{−iα} − 1) dZ]`
/// against `(dB₁, dB₂)`.
pub fn diffusion_coeffs(alpha: f64) -> (f64, f64) {
    let h = crate::trig::half_angle(alpha);
    (h.cos_minus_one(), h.sin())
}

/// Limit of max D(λ) / ln x: 2/(√β π).
pub fn deviation_slope(beta: f64) -> f64 {
    2.0 / (beta.sqrt() * std::f64::consts::PI)
}

/// Limit of max M_{λ,∞} / ln x: 4/√β.
pub fn martingale_slope(beta: f64) -> f64 {
    4.0 / beta.sqrt()
}

/// Limit of max (α_{λ,∞} − λ) / ln x: 4/√(2β).
pub fn one_sided_slope(beta: f64) -> f64 {
    4.0 / (2.0 * beta).sqrt()
}

/// Log-correlated centering (4/√β)(ln x − ¾ ln ln x).
pub fn max_centering(x: f64, beta: f64) -> f64 {
    martingale_slope(beta) * log_loglog_predictor(x)
}

/// ln x − ¾ ln ln x.
pub fn log_loglog_predictor(x: f64) -> f64 {
    x.ln() - 0.75 * x.ln().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{E, PI};

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn drift_rate_examples() {
        assert_eq!(drift_rate(0.0, 3.0, 2.0).unwrap(), 0.0);
        assert_eq!(drift_rate(1.0, 0.0, 4.0).unwrap(), 1.0);
        // 2·1·e^{−ln 2}
        let v = drift_rate(2.0, 2f64.ln(), 4.0).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert!(drift_rate(f64::NAN, 0.0, 2.0).is_err());
        assert!(drift_rate(1.0, f64::INFINITY, 2.0).is_err());
        assert!(drift_rate(1.0, 0.0, 0.0).is_err());
        assert!(drift_rate(-3.0, 1.0, 2.0).unwrap() < 0.0);
    }

    #[test]
    fn t_lambda_examples() {
        assert_eq!(t_lambda(1.0, 3.0).unwrap(), 0.0);
        assert!((t_lambda(E, 4.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((t_lambda(E * E, 2.0).unwrap() - 4.0).abs() < 1e-14);
        assert!(matches!(t_lambda(0.5, 2.0), Err(ModelError::LambdaBelowOne(_))));
    }

    #[test]
    fn t_prime_examples() {
        assert_eq!(t_prime(1.0, 2.0, 1.0).unwrap(), 0.0);
        assert!((t_prime(E.powi(4), 4.0, 1.0).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(t_prime(E, 4.0, 10.0).unwrap(), 0.0);
        assert!(t_prime(10.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn diffusion_coeff_examples() {
        assert_eq!(diffusion_coeffs(0.0), (0.0, 0.0));
        let (a, b) = diffusion_coeffs(PI);
        assert!((a + 2.0).abs() < 1e-15 && b.abs() < 1e-15);
        assert!((a * a + b * b - 4.0).abs() < 1e-14);
    }

    #[test]
    fn drift_integrates_to_lambda() {
        for &beta in &[0.5, 2.0, 4.0] {
            for &lambda in &[1.0, 7.0, 100.0] {
                let f = |t: f64| drift_rate(lambda, t, beta).unwrap();
                // tail beyond 80/β is below e^{-20}·λ
                let horizon = 160.0 / beta;
                let total = simpson(f, 0.0, horizon, 20_000);
                let tail = lambda * libm::exp(-0.25 * beta * horizon);
                assert!(((total + tail) - lambda).abs() / lambda < 1e-8);
                for &t in &[0.3, 2.0, 9.0] {
                    let part = simpson(f, 0.0, t, 2_000);
                    let closed = lambda * drift_fraction(t, beta);
                    assert!((part - closed).abs() <= 1e-10 * lambda.max(1.0));
                }
            }
        }
    }

    #[test]
    fn clock_value_fields() {
        let c = ClockValue::at(1.5, 2.0).unwrap();
        assert!((c.f_t - 0.5 * (-0.75f64).exp()).abs() < 1e-15);
        assert!((c.h_t - (1.0 - (-0.75f64).exp())).abs() < 1e-15);
        assert!((c.h_t - (1.0 - 4.0 / 2.0 * c.f_t)).abs() < 1e-15);
        assert!(ClockValue::at(-1.0, 2.0).is_err());
    }

    #[test]
    fn reported_constants() {
        assert!((deviation_slope(2.0) - 0.450_158).abs() < 1e-6);
        assert!((deviation_slope(1.0) - std::f64::consts::FRAC_2_PI).abs() < 1e-6);
        assert_eq!(martingale_slope(4.0), 2.0);
        assert_eq!(one_sided_slope(2.0), 2.0);
        assert_eq!(one_sided_slope(8.0), 1.0);
        let x = 2f64.powi(10);
        assert!((max_centering(x, 4.0) - 10.95).abs() < 0.01);
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::full_grid(2.0, 8).is_ok());
        assert!(ModelParams::full_grid(0.0, 8).is_err());
        assert!(ModelParams::full_grid(2.0, 0).is_err());
        assert!(ModelParams::new(2.0, 8, vec![1, 3, 3]).is_err());
        assert!(ModelParams::new(2.0, 8, vec![0, 3]).is_err());
        assert!(ModelParams::new(2.0, 8, vec![3, 9]).is_err());
        assert_eq!(ModelParams::with_grid(2.0, vec![8, 16]).unwrap().x_max, 16);
    }

    proptest! {
        #[test]
        fn drift_decreasing_in_time(lambda in 0.1f64..1e4, t in 0.0f64..50.0, dt in 1e-3f64..5.0, beta in 0.2f64..8.0) {
            prop_assert!(drift_rate(lambda, t + dt, beta).unwrap() < drift_rate(lambda, t, beta).unwrap());
        }

        #[test]
        fn clock_h_increasing(t in 0.0f64..30.0, dt in 1e-3f64..5.0, beta in 0.2f64..8.0) {
            // H saturates at 1.0 in double precision once e^{-βt/4} drops below an ulp.
            let (a, b) = (drift_fraction(t, beta), drift_fraction(t + dt, beta));
            if beta * t < 100.0 {
                prop_assert!(b > a);
            } else {
                prop_assert!(b >= a);
            }
        }

        #[test]
        fn coefficient_norm_identity(alpha in -1e4f64..1e4) {
            let (a, b) = diffusion_coeffs(alpha);
            let half = (alpha / 2.0).sin();
            prop_assert!((a * a + b * b - 4.0 * half * half).abs() < 1e-12);
        }

        #[test]
        fn t_lambda_additive(l in 1u32..5_000, m in 1u32..5_000, beta in 0.5f64..8.0) {
            let (l, m) = (l as f64, m as f64);
            let lhs = t_lambda(l * m, beta).unwrap();
            let rhs = t_lambda(l, beta).unwrap() + t_lambda(m, beta).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }
    }
}
