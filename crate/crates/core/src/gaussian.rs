//! The Gaussian comparison field G_{λ,t} = ∫ 2 sin(λH(s)) dB₂(s): exact
//! covariance by quadrature, simulation on the shared noise stream, and the
//! centered-maximum diagnostic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, ModelError, ModelParams};
use crate::sde::{derive_stream, DriftSchedule, NoiseStream, SdeError, StepPolicy};
use crate::stats::{self, MeanSe};
use crate::trig::sin_cos;

#[derive(Debug, Error)]
pub enum GaussianError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error("quadrature reached relative error {achieved:.3e}, wanted {wanted:.1e}")]
    NoConvergence { achieved: f64, wanted: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

const REL_TOL: f64 = 1e-8;
const MAX_DEPTH: u32 = 30;

// Gauss–Kronrod 7/15 nodes on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// (Kronrod estimate, |Kronrod − Gauss|, ∫|f| estimate) on [a, b].
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64, f64) {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    let mut abs = WGK[7] * fc.abs();
    for j in 0..7 {
        let (f1, f2) = (f(c - r * XGK[j]), f(c + r * XGK[j]));
        k += WGK[j] * (f1 + f2);
        abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            g += WG[j / 2] * (f1 + f2);
        }
    }
    (k * r, ((k - g) * r).abs(), abs * r)
}

fn adapt<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32, err: &mut f64) -> f64 {
    let (k, e, _) = gk15(f, a, b);
    if e <= tol || depth >= MAX_DEPTH {
        *err += e;
        return k;
    }
    let m = 0.5 * (a + b);
    adapt(f, a, m, 0.5 * tol, depth + 1, err) + adapt(f, m, b, 0.5 * tol, depth + 1, err)
}

/// Adaptive integral of `f` over [0, t] on panels no wider than `panel`,
/// to relative tolerance [`REL_TOL`] of ∫|f|.
fn integrate_panels<F: Fn(f64) -> f64>(f: &F, t: f64, panel: f64) -> Result<f64, GaussianError> {
    if t == 0.0 {
        return Ok(0.0);
    }
    let n = (t / panel).ceil().max(1.0) as usize;
    let w = t / n as f64;
    let scale: f64 = (0..n)
        .map(|i| gk15(f, i as f64 * w, if i + 1 == n { t } else { (i + 1) as f64 * w }).2)
        .sum();
    if scale == 0.0 {
        return Ok(0.0);
    }
    let per_panel = REL_TOL * scale / n as f64;
    let mut err = 0.0;
    let mut total = 0.0;
    for i in 0..n {
        let b = if i + 1 == n { t } else { (i + 1) as f64 * w };
        total += adapt(f, i as f64 * w, b, per_panel, 0, &mut err);
    }
    if err > REL_TOL * scale {
        return Err(GaussianError::NoConvergence {
            achieved: err / scale,
            wanted: REL_TOL,
        });
    }
    Ok(total)
}

/// [G_λ, G_μ]_t = 4 ∫₀ᵗ sin(λH(s)) sin(μH(s)) ds.
pub fn g_covariance(lambda: f64, mu: f64, t: f64, beta: f64) -> Result<f64, GaussianError> {
    model::drift_rate(1.0, t, beta)?;
    if !lambda.is_finite() || !mu.is_finite() {
        return Err(GaussianError::InvalidArgument(format!("lambda = {lambda}, mu = {mu}")));
    }
    if lambda == 0.0 || mu == 0.0 || t == 0.0 {
        return Ok(0.0);
    }
    // order the pair so the result is symmetric bit for bit
    let (lo, hi) = if lambda.abs() <= mu.abs() { (lambda, mu) } else { (mu, lambda) };
    let f = |s: f64| {
        let h = model::drift_fraction(s, beta);
        4.0 * libm::sin(lo * h) * libm::sin(hi * h)
    };
    // π/(4·max|λ|·max H'), max H' = β/4
    let panel = std::f64::consts::PI / (hi.abs() * beta);
    integrate_panels(&f, t, panel)
}

/// One draw of G_{λ,T_λ} over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFieldSample {
    pub lambda_grid: Vec<u32>,
    pub values: Vec<f64>,
    pub seed: u64,
    pub stream_id: u64,
}

impl GaussianFieldSample {
    /// max over λ ≤ x of G_{λ,T_λ}.
    pub fn max_up_to(&self, x: u32) -> Option<f64> {
        self.lambda_grid
            .iter()
            .zip(&self.values)
            .take_while(|(&l, _)| l <= x)
            .map(|(_, &v)| v)
            .reduce(f64::max)
    }
}

/// G_λ accumulated as Σ 2 sin(λH(s_k))·ΔB₂ from the policy's step rule,
/// each λ evaluated at T_λ (the step grid lands on every T_λ).
pub fn simulate_field(
    params: &ModelParams,
    policy: &StepPolicy,
    noise: &NoiseStream,
) -> Result<GaussianFieldSample, GaussianError> {
    params.validate()?;
    policy.validate()?;
    let beta = params.beta;
    let grid = &params.lambda_grid;
    let stops: Vec<f64> = grid
        .iter()
        .map(|&l| model::t_lambda(l as f64, beta))
        .collect::<Result<_, _>>()?;
    let horizon = *stops.last().unwrap();
    if policy.t_end < horizon - 1e-12 {
        return Err(SdeError::HorizonTooShort {
            t_end: policy.t_end,
            required: horizon,
        }
        .into());
    }
    let sched_policy = StepPolicy {
        t_end: horizon,
        ..policy.clone()
    }
    .with_breakpoints(stops.clone());
    let lambdas: Vec<f64> = grid.iter().map(|&l| l as f64).collect();
    let mut values = vec![0.0; grid.len()];
    let mut done = stops.partition_point(|&t| t <= 1e-12);
    let mut stream = noise.rewound();
    for (t, h, t_next) in DriftSchedule::new(&sched_policy, params.lambda_max(), beta) {
        let (_, db2) = stream.increment(h, sched_policy.substeps);
        let hv = model::drift_fraction(t, beta);
        let two_db2 = 2.0 * db2;
        for (v, &l) in values[done..].iter_mut().zip(&lambdas[done..]) {
            *v += sin_cos(l * hv).0 * two_db2;
        }
        while done < stops.len() && stops[done] <= t_next + 1e-12 {
            done += 1;
        }
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(SdeError::NonFinite {
            step: 0,
            lambda: lambdas[i],
        }
        .into());
    }
    Ok(GaussianFieldSample {
        lambda_grid: grid.clone(),
        values,
        seed: noise.seed,
        stream_id: noise.stream_id,
    })
}

/// Mean of max_{λ ≤ x} G_{λ,T_λ} with its centering residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMaxDiagnostic {
    pub x: u32,
    pub mean_max: f64,
    pub se: f64,
    pub count: usize,
    /// (4/√β)(ln x − ¾ ln ln x); 0 where ln ln x is undefined.
    pub centering: f64,
    pub residual: f64,
}

/// Draw `replicas` field samples on the grid 1..=x_max of the largest x
/// and report the diagnostic for every x in `x_list` (nested maxima).
pub fn gaussian_max_sweep(
    x_list: &[u32],
    beta: f64,
    replicas: usize,
    seed: u64,
    policy: Option<&StepPolicy>,
) -> Result<Vec<GaussianMaxDiagnostic>, GaussianError> {
    let x_max = *x_list
        .iter()
        .max()
        .ok_or_else(|| GaussianError::InvalidArgument("empty x list".into()))?;
    if replicas == 0 {
        return Err(GaussianError::InvalidArgument("replicas must be positive".into()));
    }
    let params = ModelParams::full_grid(beta, x_max)?;
    let policy = match policy {
        Some(p) => p.clone(),
        None => StepPolicy::until(beta, x_max as f64, model::t_lambda(x_max as f64, beta)?),
    };
    let maxima: Vec<Vec<f64>> = (0..replicas)
        .into_par_iter()
        .map(|r| {
            let s = simulate_field(&params, &policy, &derive_stream(seed, r as u64))?;
            Ok(x_list.iter().map(|&x| s.max_up_to(x).unwrap_or(0.0)).collect())
        })
        .collect::<Result<_, GaussianError>>()?;
    Ok(x_list
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let col: Vec<f64> = maxima.iter().map(|m| m[k]).collect();
            let MeanSe { mean, se, count } = stats::mean_se(&col);
            let xf = x as f64;
            let centering = if xf > 1.0 { model::max_centering(xf, beta) } else { 0.0 };
            GaussianMaxDiagnostic {
                x,
                mean_max: mean,
                se,
                count,
                centering,
                residual: mean - centering,
            }
        })
        .collect())
}

/// Single-x form of [`gaussian_max_sweep`].
pub fn gaussian_max_diagnostic(
    x: u32,
    beta: f64,
    replicas: usize,
    seed: u64,
) -> Result<GaussianMaxDiagnostic, GaussianError> {
    Ok(gaussian_max_sweep(&[x], beta, replicas, seed, None)?.remove(0))
}

#[cfg(test)]
mod tests;
