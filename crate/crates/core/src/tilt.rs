//! Girsanov tilting: exponential-martingale weights, importance-sampling
//! estimates, and the tilted-measure diagnostics of the tube event and the
//! weighted count S_x.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelParams;
use crate::sde::{self, derive_stream, Dynamics, SdeError, Step, StepObserver, StepPolicy, TiltedPath};
use crate::stats::{self, paley_zygmund_bound, MartingaleTrace, StatsError, TubeParams};
use crate::trig::half_angle;

#[derive(Debug, Error)]
pub enum TiltError {
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("invalid weight input: {0}")]
    InvalidInput(String),
    #[error("need at least one replica")]
    NoReplicas,
}

/// (log ℰ, ℰ) with log ℰ = η·m_T − η²·bracket_T/2.
pub fn girsanov_weight(m_t: f64, bracket_t: f64, eta: f64) -> Result<(f64, f64), TiltError> {
    if !(bracket_t >= 0.0) || !m_t.is_finite() || !eta.is_finite() || !bracket_t.is_finite() {
        return Err(TiltError::InvalidInput(format!(
            "m = {m_t}, bracket = {bracket_t}, eta = {eta}"
        )));
    }
    let lw = eta * m_t - 0.5 * eta * eta * bracket_t;
    Ok((lw, lw.exp()))
}

/// The tilted-path experiment: λ, η, horizon and step control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltSpec {
    pub lambda: f64,
    pub eta: f64,
    pub beta: f64,
    pub horizon: f64,
    pub h0: f64,
    pub refine_c: f64,
    /// Output stride of the stored paths (0 keeps only the endpoints).
    pub out_stride: usize,
    pub dynamics: Dynamics,
}

impl TiltSpec {
    pub fn new(lambda: f64, eta: f64, beta: f64, horizon: f64) -> Self {
        Self {
            lambda,
            eta,
            beta,
            horizon,
            h0: sde::DEFAULT_H0,
            refine_c: sde::DEFAULT_REFINE_C,
            out_stride: sde::DEFAULT_OUT_STRIDE,
            dynamics: Dynamics::SineEquation,
        }
    }

    pub fn with_out_stride(mut self, stride: usize) -> Self {
        self.out_stride = stride;
        self
    }

    pub fn with_dynamics(mut self, dynamics: Dynamics) -> Self {
        self.dynamics = dynamics;
        self
    }

    pub fn policy(&self) -> StepPolicy {
        StepPolicy::until(self.beta, self.lambda.abs().max(1.0), self.horizon)
            .with_h0(self.h0)
            .with_refine_c(self.refine_c)
            .with_out_stride(self.out_stride)
    }

    /// Integrate replica `stream_id` of `seed`.
    pub fn path(&self, seed: u64, stream_id: u64) -> Result<TiltedPath, SdeError> {
        let noise = derive_stream(seed, stream_id);
        sde::integrate_tilted_with(self.lambda, self.eta, self.beta, &self.policy(), &noise, self.dynamics)
    }
}

/// Tilted paths with their log-densities log dQ/dP = log ℰ((η/2)M_{λ,T}).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltRun {
    pub spec: TiltSpec,
    pub paths: Vec<TiltedPath>,
    pub log_weights: Vec<f64>,
}

impl TiltRun {
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|l| l.exp()).collect()
    }
}

/// log ℰ(θM_T) of a path endpoint, from the stored path fields.
pub fn path_log_weight(path: &TiltedPath, theta: f64) -> Result<f64, TiltError> {
    Ok(girsanov_weight(path.terminal_martingale(), path.terminal_bracket(), theta)?.0)
}

/// Exponent θ of the density dQ/dP = ℰ(θM) under which the phase difference
/// follows the accelerated equation with acceleration η.
///
/// A drift η·sin(u/2) on the driving motion W, with dM = 2 sin(u/2) dW,
/// has density exp(∫η sin dW − ½∫η² sin² ds) = ℰ((η/2)M).
pub fn density_exponent(eta: f64) -> f64 {
    0.5 * eta
}

/// Map `f` over `replicas` tilted paths (stream ids `stream_base + r`),
/// in parallel, collected in replica order.
pub fn map_paths<T, F>(spec: &TiltSpec, replicas: usize, seed: u64, stream_base: u64, f: F) -> Result<Vec<T>, TiltError>
where
    T: Send,
    F: Fn(&TiltedPath) -> Result<T, TiltError> + Sync,
{
    if replicas == 0 {
        return Err(TiltError::NoReplicas);
    }
    (0..replicas)
        .into_par_iter()
        .map(|r| f(&spec.path(seed, stream_base + r as u64)?))
        .collect()
}

/// Simulate a [`TiltRun`] under Q_η (η = `spec.eta`).
pub fn tilt_run(spec: &TiltSpec, replicas: usize, seed: u64, stream_base: u64) -> Result<TiltRun, TiltError> {
    let theta = density_exponent(spec.eta);
    let pairs = map_paths(spec, replicas, seed, stream_base, |p| {
        let lw = path_log_weight(p, theta)?;
        Ok((p.clone(), lw))
    })?;
    let (paths, log_weights) = pairs.into_iter().unzip();
    Ok(TiltRun {
        spec: spec.clone(),
        paths,
        log_weights,
    })
}

/// Importance-sampling estimate with its diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    pub se: f64,
    /// Effective sample size (Σw)²/Σw² over the paths in the event.
    pub ess: f64,
    pub hits: usize,
    pub n: usize,
}

impl Estimate {
    /// Zero effective sample size: the estimate carries no information.
    pub fn degenerate(&self) -> bool {
        !(self.ess > 0.0)
    }

    pub fn ci95(&self) -> (f64, f64) {
        (self.estimate - 1.96 * self.se, self.estimate + 1.96 * self.se)
    }

    pub fn overlaps(&self, other: &Estimate) -> bool {
        let (a, b) = self.ci95();
        let (c, d) = other.ci95();
        a <= d && c <= b
    }

    /// Plain frequency with binomial standard error.
    pub fn frequency(hits: usize, n: usize) -> Self {
        let p = hits as f64 / n as f64;
        let se = if n > 1 { (p * (1.0 - p) / (n - 1) as f64).sqrt() } else { 0.0 };
        Self {
            estimate: p,
            se,
            ess: hits as f64,
            hits,
            n,
        }
    }
}

/// Mean and SE of `1[hit_i]·exp(log_values_i)`, shifted by the largest
/// exponent so nothing overflows.
pub fn weighted_mean(log_values: &[f64], hit: &[bool]) -> Estimate {
    let n = log_values.len();
    let hits = hit.iter().filter(|h| **h).count();
    let shift = log_values
        .iter()
        .zip(hit)
        .filter(|(_, h)| **h)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if hits == 0 || !shift.is_finite() {
        return Estimate {
            estimate: 0.0,
            se: 0.0,
            ess: 0.0,
            hits,
            n,
        };
    }
    let y: Vec<f64> = log_values
        .iter()
        .zip(hit)
        .map(|(l, h)| if *h { (l - shift).exp() } else { 0.0 })
        .collect();
    let sum: f64 = y.iter().sum();
    let sum_sq: f64 = y.iter().map(|v| v * v).sum();
    let mean = sum / n as f64;
    let var = if n > 1 {
        y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let scale = shift.exp();
    Estimate {
        estimate: mean * scale,
        se: (var / n as f64).sqrt() * scale,
        ess: sum * sum / sum_sq,
        hits,
        n,
    }
}

/// P-probability of `event` from Q-samples: mean of 1[event]/ℰ.
pub fn importance_estimate<F>(event: F, run: &TiltRun) -> Estimate
where
    F: Fn(&TiltedPath) -> bool,
{
    let hit: Vec<bool> = run.paths.iter().map(&event).collect();
    let inv: Vec<f64> = run.log_weights.iter().map(|l| -l).collect();
    weighted_mean(&inv, &hit)
}

/// Mean of ℰ(θM_T) over untilted paths (E_P ℰ = 1 for every θ).
pub fn mean_weight_untilted(spec: &TiltSpec, theta: f64, replicas: usize, seed: u64) -> Result<Estimate, TiltError> {
    let untilted = TiltSpec { eta: 0.0, ..spec.clone() };
    let lw = map_paths(&untilted, replicas, seed, 0, |p| path_log_weight(p, theta))?;
    Ok(weighted_mean(&lw, &vec![true; lw.len()]))
}

/// Q_{√β,λ}(A_λ): frequency of the tube event over tilted paths on
/// [0, T'_x], every integrator step checked.
pub fn tube_probability_under_q(
    lambda: u32,
    p: &TubeParams,
    replicas: usize,
    seed: u64,
) -> Result<Estimate, TiltError> {
    let spec = TiltSpec::new(lambda as f64, p.beta.sqrt(), p.beta, p.horizon()).with_out_stride(1);
    let inside = map_paths(&spec, replicas, seed, 0, |path| {
        let trace = MartingaleTrace::from_tilted(path);
        Ok(stats::tube_indicator(trace.view(), p)?)
    })?;
    Ok(Estimate::frequency(inside.iter().filter(|b| **b).count(), replicas))
}

/// Test hooks for [`s_x_moments`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SxHooks {
    pub force_tube: bool,
    pub unit_weights: bool,
}

/// Moment estimates of S_x = Σ_{λ=x}^{2x} ℰ(θM_{λ,T'_x}) 1[A_λ] with θ the
/// density exponent of acceleration √β, so that each term has P-mean
/// Q_{√β,λ}(A_λ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SxMoments {
    pub x: u32,
    pub r: f64,
    pub beta: f64,
    pub horizon: f64,
    /// E S_x / x from per-λ tilted tube probabilities.
    pub mean_q: f64,
    pub mean_q_se: f64,
    /// E S_x / x by direct weighted P-measure sampling.
    pub mean_p: f64,
    pub mean_p_se: f64,
    /// E S_x² / x² by direct weighted P-measure sampling.
    pub second_p: f64,
    pub second_p_se: f64,
    /// Direct frequency of S_x > 0 under P.
    pub positive_frac: f64,
    pub positive_se: f64,
    /// (mean_q)² / second_p when consistent.
    pub pz_bound: Option<f64>,
    pub estimators: String,
}

/// Per-λ running M, [M] and tube status along one P-measure ensemble.
struct TubeWeights {
    lambdas: Vec<u32>,
    n: usize,
    horizon: f64,
    band: f64,
    drift: f64,
    r: f64,
    m: Vec<f64>,
    br: Vec<f64>,
    inside: Vec<bool>,
}

impl TubeWeights {
    fn check(&mut self, t: f64) {
        if t > self.horizon + 1e-12 {
            return;
        }
        for k in 0..self.lambdas.len() {
            if (self.m[k] - self.drift * t).abs() > self.band || (self.br[k] - 2.0 * t).abs() > self.r {
                self.inside[k] = false;
            }
        }
    }
}

impl StepObserver for TubeWeights {
    fn observe(&mut self, step: &Step, phases: &[f64]) {
        if step.t >= self.horizon - 1e-12 {
            return;
        }
        for k in 0..self.lambdas.len() {
            let (hp, hn) = (half_angle(phases[self.n + k]), half_angle(phases[self.n - 1 - k]));
            let a = hp.cos_minus_one() - hn.cos_minus_one();
            let b = hp.sin() - hn.sin();
            self.m[k] += a * step.db1 + b * step.db2;
            self.br[k] += (a * a + b * b) * step.h;
        }
        self.check(step.t + step.h);
    }
}

/// ES_x/x from Q-probabilities of A_λ (one tilted run per λ), ES_x²/x² and
/// Pr(S_x > 0) from untilted ensembles over the whole grid [x, 2x].
pub fn s_x_moments(
    x: u32,
    r: f64,
    beta: f64,
    replicas: usize,
    seed: u64,
    hooks: SxHooks,
) -> Result<SxMoments, TiltError> {
    if replicas == 0 {
        return Err(TiltError::NoReplicas);
    }
    let tube = TubeParams::new(r, x, beta)?;
    let horizon = tube.horizon();
    let grid: Vec<u32> = (x..=2 * x).collect();
    let xf = x as f64;

    let (mut q_sum, mut q_var) = (0.0, 0.0);
    for (k, &l) in grid.iter().enumerate() {
        let est = if hooks.force_tube {
            Estimate::frequency(replicas, replicas)
        } else {
            tube_probability_under_q(l, &tube, replicas, sde::mix64(seed.wrapping_add(k as u64 + 1)))?
        };
        q_sum += est.estimate;
        q_var += est.se * est.se;
    }

    let params = ModelParams::with_grid(beta, grid.clone()).map_err(SdeError::from)?;
    let policy = StepPolicy::until(beta, (2 * x) as f64, horizon).with_out_stride(0);
    let eta = beta.sqrt();
    let theta = density_exponent(eta);
    let samples: Vec<f64> = (0..replicas)
        .into_par_iter()
        .map(|rep| -> Result<f64, TiltError> {
            let noise = derive_stream(seed, rep as u64);
            let mut obs = TubeWeights {
                lambdas: grid.clone(),
                n: grid.len(),
                horizon,
                band: r * xf.ln().sqrt(),
                drift: eta,
                r,
                m: vec![0.0; grid.len()],
                br: vec![0.0; grid.len()],
                inside: vec![true; grid.len()],
            };
            if horizon > 0.0 {
                sde::integrate_window(&params, &policy, &noise, &mut obs)?;
            }
            let mut s = 0.0;
            for k in 0..grid.len() {
                let w = if hooks.unit_weights { 1.0 } else { girsanov_weight(obs.m[k], obs.br[k], theta)?.1 };
                if hooks.force_tube || obs.inside[k] {
                    s += w;
                }
            }
            Ok(s)
        })
        .collect::<Result<_, _>>()?;

    let scaled: Vec<f64> = samples.iter().map(|s| s / xf).collect();
    let squares: Vec<f64> = scaled.iter().map(|s| s * s).collect();
    let mp = stats::mean_se(&scaled);
    let sp = stats::mean_se(&squares);
    let pos = Estimate::frequency(samples.iter().filter(|s| **s > 0.0).count(), replicas);
    let mean_q = q_sum / xf;
    Ok(SxMoments {
        x,
        r,
        beta,
        horizon,
        mean_q,
        mean_q_se: q_var.sqrt() / xf,
        mean_p: mp.mean,
        mean_p_se: mp.se,
        second_p: sp.mean,
        second_p_se: sp.se,
        positive_frac: pos.estimate,
        positive_se: pos.se,
        pz_bound: paley_zygmund_bound(mean_q, sp.mean).ok(),
        estimators: "mean_q: sum over lambda of Q(A_lambda) from tilted paths; \
                     mean_p, second_p, positive_frac: weighted sums along untilted common-noise ensembles"
            .into(),
    })
}
