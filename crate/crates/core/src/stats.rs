//! Functionals of simulated paths: martingale traces and brackets, the
//! counting function and its maximal deviation, oscillatory integrals, tube
//! events and second-moment bounds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, ModelError};
use crate::sde::{self, NoiseStream, PhaseEnsemble, SdeError, Step, StepObserver, TiltedPath};
use crate::trig::{half_angle, round_nearest};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("no grid point at or below x = {0}")]
    EmptyGrid(u32),
    #[error("trace ends at t = {end} but the tube extends to T'_x = {needed}")]
    TraceTooShort { end: f64, needed: f64 },
    #[error("inconsistent moments: second moment {second} < mean² {mean_sq}")]
    InconsistentMoments { second: f64, mean_sq: f64 },
    #[error("need at least {needed} points for a fit, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate predictor: all x values equal")]
    DegeneratePredictor,
    #[error("time {0} is outside the trace")]
    OutOfRange(f64),
}

/// M_{λ,t} and [M_λ]_t along one path, sampled at every integrator step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTrace {
    pub lambda: u32,
    pub times: Vec<f64>,
    pub m: Vec<f64>,
    pub bracket: Vec<f64>,
    /// α_λ − α_{−λ} at `times`.
    pub difference: Vec<f64>,
    /// Per step: h, a = cos α_λ − cos α_{−λ}, b = sin α_λ − sin α_{−λ}.
    #[serde(default)]
    pub integrand: Vec<[f64; 3]>,
    /// End of the drifted phase (for the drift-subtraction cross-check).
    pub t_drift_end: f64,
    pub beta: f64,
}

impl MartingaleTrace {
    fn empty(lambda: u32, beta: f64) -> Self {
        Self {
            lambda,
            times: vec![0.0],
            m: vec![0.0],
            bracket: vec![0.0],
            difference: vec![0.0],
            integrand: Vec::new(),
            t_drift_end: 0.0,
            beta,
        }
    }

    /// A trace from a tilted path. `m` is the untilted martingale
    /// `m_part + (η/2)·bracket`; no per-step integrand is kept.
    pub fn from_tilted(path: &TiltedPath) -> Self {
        Self {
            lambda: path.lambda.round() as u32,
            times: path.times.clone(),
            m: path.martingale(),
            bracket: path.bracket.clone(),
            difference: path.u.clone(),
            integrand: Vec::new(),
            t_drift_end: path.final_time(),
            beta: path.beta,
        }
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Index of the last sample at or before `t`.
    pub fn index_at(&self, t: f64) -> Result<usize, StatsError> {
        if t < 0.0 || t > self.final_time() + 1e-12 {
            return Err(StatsError::OutOfRange(t));
        }
        Ok(self.times.partition_point(|&s| s <= t + 1e-12) - 1)
    }

    pub fn m_at(&self, t: f64) -> Result<f64, StatsError> {
        Ok(self.m[self.index_at(t)?])
    }

    pub fn bracket_at(&self, t: f64) -> Result<f64, StatsError> {
        Ok(self.bracket[self.index_at(t)?])
    }

    /// The second route to M: (α_λ − α_{−λ})(t) − 2λH(t), H frozen after the
    /// drift is switched off.
    pub fn drift_subtracted(&self) -> Vec<f64> {
        let l = self.lambda as f64;
        self.times
            .iter()
            .zip(&self.difference)
            .map(|(&t, &d)| d - 2.0 * l * model::drift_fraction(t.min(self.t_drift_end), self.beta))
            .collect()
    }

    /// max_t |M_accumulated − M_subtracted|.
    pub fn subtraction_gap(&self) -> f64 {
        self.drift_subtracted()
            .iter()
            .zip(&self.m)
            .map(|(s, m)| (s - m).abs())
            .fold(0.0, f64::max)
    }

    pub fn view(&self) -> MartingaleView<'_> {
        MartingaleView {
            times: &self.times,
            m: &self.m,
            bracket: &self.bracket,
        }
    }
}

/// Borrowed `(t, M_t, [M]_t)` samples.
#[derive(Debug, Clone, Copy)]
pub struct MartingaleView<'a> {
    pub times: &'a [f64],
    pub m: &'a [f64],
    pub bracket: &'a [f64],
}

/// Observer accumulating M and [M] for chosen λ during an integration:
///
/// ```text
/// M      += (cos α_λ − cos α_{−λ}) ΔB₁ + (sin α_λ − sin α_{−λ}) ΔB₂
/// [M]    += (a² + b²)·h          = 4 sin²((α_λ − α_{−λ})/2)·h
/// ```
#[derive(Debug, Clone)]
pub struct TraceRecorder {
    /// (λ, column of +λ, column of −λ)
    targets: Vec<(u32, usize, usize)>,
    traces: Vec<MartingaleTrace>,
    drift_end: f64,
}

impl TraceRecorder {
    pub fn new(beta: f64, targets: Vec<(u32, usize, usize)>) -> Self {
        let traces = targets.iter().map(|&(l, _, _)| MartingaleTrace::empty(l, beta)).collect();
        Self {
            targets,
            traces,
            drift_end: 0.0,
        }
    }

    /// Targets laid out as in a [`PhaseEnsemble`] over `grid`.
    pub fn for_grid(beta: f64, grid: &[u32], lambdas: &[u32]) -> Result<Self, StatsError> {
        let n = grid.len();
        let targets = lambdas
            .iter()
            .map(|&l| {
                grid.binary_search(&l)
                    .map(|i| (l, n + i, n - 1 - i))
                    .map_err(|_| StatsError::GridMismatch(format!("lambda {l} not on grid")))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self::new(beta, targets))
    }

    pub fn into_traces(self) -> Vec<MartingaleTrace> {
        self.traces
    }
}

impl StepObserver for TraceRecorder {
    fn observe(&mut self, step: &Step, phases: &[f64]) {
        if step.drifting {
            self.drift_end = step.t + step.h;
        }
        for (tr, &(_, p, n)) in self.traces.iter_mut().zip(&self.targets) {
            let (hp, hn) = (half_angle(phases[p]), half_angle(phases[n]));
            // cos α − 1 as in the kernel, so the increment matches it bitwise
            let a = hp.cos_minus_one() - hn.cos_minus_one();
            let b = hp.sin() - hn.sin();
            let m = tr.m.last().unwrap() + a * step.db1 + b * step.db2;
            let br = tr.bracket.last().unwrap() + (a * a + b * b) * step.h;
            *tr.difference.last_mut().unwrap() = phases[p] - phases[n];
            tr.integrand.push([step.h, a, b]);
            tr.times.push(step.t + step.h);
            tr.m.push(m);
            tr.bracket.push(br);
            tr.difference.push(f64::NAN);
        }
    }

    fn finish(&mut self, t: f64, phases: &[f64]) {
        for (tr, &(_, p, n)) in self.traces.iter_mut().zip(&self.targets) {
            *tr.difference.last_mut().unwrap() = phases[p] - phases[n];
            *tr.times.last_mut().unwrap() = t;
            tr.t_drift_end = self.drift_end;
        }
    }
}

/// Replay the ensemble's noise for ±λ and accumulate M_{λ,t} and [M_λ]_t.
pub fn martingale_trace(
    ensemble: &PhaseEnsemble,
    noise: &NoiseStream,
    lambda: u32,
) -> Result<MartingaleTrace, StatsError> {
    let mut rec = TraceRecorder::new(ensemble.beta, vec![(lambda, 1, 0)]);
    sde::replay_pair(ensemble, noise, lambda, &mut rec)?;
    let trace = rec.into_traces().pop().unwrap();
    let expected = ensemble.total_steps * ensemble.refine as usize;
    if trace.integrand.len() != expected {
        return Err(SdeError::ReplayMismatch(format!(
            "trace has {} steps, ensemble {}",
            trace.integrand.len(),
            expected
        ))
        .into());
    }
    Ok(trace)
}

/// [M_λ, M_μ]_t on the common step grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossBracket {
    pub lambda: u32,
    pub mu: u32,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl CrossBracket {
    /// Value at the last grid time ≤ t.
    pub fn at(&self, t: f64) -> Result<f64, StatsError> {
        let end = *self.times.last().unwrap();
        if t < 0.0 || t > end + 1e-12 {
            return Err(StatsError::OutOfRange(t));
        }
        Ok(self.values[self.times.partition_point(|&s| s <= t + 1e-12) - 1])
    }
}

/// Σ (a_λ a_μ + b_λ b_μ)·h along the shared grid.
pub fn cross_bracket(
    first: &MartingaleTrace,
    second: &MartingaleTrace,
    ensemble: &PhaseEnsemble,
) -> Result<CrossBracket, StatsError> {
    for tr in [first, second] {
        if ensemble.grid_index(tr.lambda).is_none() {
            return Err(StatsError::GridMismatch(format!("lambda {} not in ensemble", tr.lambda)));
        }
    }
    cross_bracket_of(first, second)
}

/// As [`cross_bracket`] without checking against an ensemble.
pub fn cross_bracket_of(first: &MartingaleTrace, second: &MartingaleTrace) -> Result<CrossBracket, StatsError> {
    if first.integrand.is_empty() && first.times.len() > 1 {
        return Err(StatsError::GridMismatch("trace carries no per-step integrand".into()));
    }
    if first.times != second.times || first.integrand.len() != second.integrand.len() {
        return Err(StatsError::GridMismatch(format!(
            "traces for {} and {} use different step grids",
            first.lambda, second.lambda
        )));
    }
    let mut values = Vec::with_capacity(first.times.len());
    let mut acc = 0.0;
    values.push(acc);
    for (p, q) in first.integrand.iter().zip(&second.integrand) {
        acc += (p[1] * q[1] + p[2] * q[2]) * p[0];
        values.push(acc);
    }
    Ok(CrossBracket {
        lambda: first.lambda,
        mu: second.lambda,
        times: first.times.clone(),
        values,
    })
}

/// Counting function and deviations for one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountingResult {
    pub lambdas: Vec<u32>,
    pub n: Vec<i64>,
    /// D(λ) = N(λ) − λ/π.
    pub deviation: Vec<f64>,
    pub converged: Vec<bool>,
    /// Terminal α_λ.
    pub terminal_alpha: Vec<f64>,
    pub max_dev: Option<f64>,
    pub argmax: Option<u32>,
    pub one_sided_max: Option<f64>,
    pub nonconverged: usize,
}

impl CountingResult {
    /// Max of D over converged λ ≤ x, with its argmax (first on ties).
    pub fn max_up_to(&self, x: u32) -> Option<(f64, u32)> {
        let mut best: Option<(f64, u32)> = None;
        for i in 0..self.lambdas.len() {
            if self.lambdas[i] > x {
                break;
            }
            if !self.converged[i] {
                continue;
            }
            if best.is_none_or(|(d, _)| self.deviation[i] > d) {
                best = Some((self.deviation[i], self.lambdas[i]));
            }
        }
        best
    }

    /// max over converged λ ≤ x of α_λ(end) − λ.
    pub fn one_sided_up_to(&self, x: u32) -> Option<f64> {
        self.lambdas
            .iter()
            .zip(&self.terminal_alpha)
            .zip(&self.converged)
            .take_while(|((&l, _), _)| l <= x)
            .filter(|(_, &c)| c)
            .map(|((&l, &a), _)| a - l as f64)
            .reduce(f64::max)
    }

    pub fn n_of(&self, lambda: u32) -> Option<i64> {
        self.lambdas.binary_search(&lambda).ok().map(|i| self.n[i])
    }

    /// Fraction of adjacent grid pairs with N non-decreasing.
    pub fn monotone_fraction(&self) -> f64 {
        if self.n.len() < 2 {
            return 1.0;
        }
        let ok = self.n.windows(2).filter(|w| w[0] <= w[1]).count();
        ok as f64 / (self.n.len() - 1) as f64
    }
}

/// Nearest integer to (α_λ − α_{−λ})/(2π) at the end of the ensemble.
pub fn turns(difference: f64) -> i64 {
    round_nearest(difference / TWO_PI) as i64
}

/// N(λ), D(λ) and the max statistics for one replica.
pub fn counting_n(ensemble: &PhaseEnsemble) -> CountingResult {
    let k = ensemble.n_lambda();
    let last = ensemble.terminal();
    let mut res = CountingResult {
        lambdas: ensemble.lambda_grid.clone(),
        n: Vec::with_capacity(k),
        deviation: Vec::with_capacity(k),
        converged: ensemble.converged.clone(),
        terminal_alpha: Vec::with_capacity(k),
        max_dev: None,
        argmax: None,
        one_sided_max: None,
        nonconverged: ensemble.converged.iter().filter(|c| !**c).count(),
    };
    for i in 0..k {
        let n = turns(ensemble.terminal_difference(i));
        res.n.push(n);
        res.deviation
            .push(n as f64 - ensemble.lambda_grid[i] as f64 / std::f64::consts::PI);
        res.terminal_alpha.push(last[ensemble.pos_index(i)]);
    }
    let x = *ensemble.lambda_grid.last().unwrap();
    if let Some((d, l)) = res.max_up_to(x) {
        res.max_dev = Some(d);
        res.argmax = Some(l);
    }
    res.one_sided_max = res.one_sided_up_to(x);
    res
}

/// Per-replica (max over λ ≤ x of D(λ), argmax); `None` when every λ ≤ x
/// failed to converge.
pub fn max_deviation(results: &[CountingResult], x: u32) -> Result<Vec<Option<(f64, u32)>>, StatsError> {
    if results.iter().any(|r| r.lambdas.first().is_none_or(|&l| l > x)) {
        return Err(StatsError::EmptyGrid(x));
    }
    Ok(results.iter().map(|r| r.max_up_to(x)).collect())
}

/// max over λ ≤ x of α_λ(end) − λ, over all grid points.
pub fn one_sided_max(ensemble: &PhaseEnsemble, x: u32) -> Result<f64, StatsError> {
    let last = ensemble.terminal();
    ensemble
        .lambda_grid
        .iter()
        .enumerate()
        .take_while(|(_, &l)| l <= x)
        .map(|(i, &l)| last[ensemble.pos_index(i)] - l as f64)
        .reduce(f64::max)
        .ok_or(StatsError::EmptyGrid(x))
}

/// sup_{t ≤ T} |∫₀ᵗ e^{i a u_s} ds| by the trapezoid rule on the sample grid.
pub fn oscillatory_sup(times: &[f64], u: &[f64], a: f64, horizon: f64) -> f64 {
    let mut re = 0.0;
    let mut im = 0.0;
    let mut best: f64 = 0.0;
    let (mut s0, mut c0) = libm::sincos(a * u[0]);
    for k in 1..times.len() {
        if times[k] > horizon + 1e-12 {
            break;
        }
        let (s1, c1) = libm::sincos(a * u[k]);
        let dt = times[k] - times[k - 1];
        re += 0.5 * (c0 + c1) * dt;
        im += 0.5 * (s0 + s1) * dt;
        best = best.max(re.hypot(im));
        (s0, c0) = (s1, c1);
    }
    best
}

/// Parameters of the tube event A_λ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeParams {
    pub r: f64,
    pub x: u32,
    pub beta: f64,
}

impl TubeParams {
    pub fn new(r: f64, x: u32, beta: f64) -> Result<Self, StatsError> {
        model::t_prime(x.max(1) as f64, beta, r)?;
        Ok(Self { r, x, beta })
    }

    /// T'_x (clamped at 0).
    pub fn horizon(&self) -> f64 {
        model::t_prime(self.x.max(1) as f64, self.beta, self.r).unwrap_or(0.0)
    }
}

/// True iff |M_t − √β t| ≤ R√(ln x) and |[M]_t − 2t| ≤ R at every sample
/// time t ≤ T'_x.
pub fn tube_indicator(trace: MartingaleView<'_>, p: &TubeParams) -> Result<bool, StatsError> {
    let horizon = p.horizon();
    let end = *trace.times.last().unwrap_or(&0.0);
    if end < horizon - 1e-9 {
        return Err(StatsError::TraceTooShort { end, needed: horizon });
    }
    let band = p.r * (p.x.max(1) as f64).ln().sqrt();
    let drift = p.beta.sqrt();
    for k in 0..trace.times.len() {
        let t = trace.times[k];
        if t > horizon + 1e-12 {
            break;
        }
        if (trace.m[k] - drift * t).abs() > band || (trace.bracket[k] - 2.0 * t).abs() > p.r {
            return Ok(false);
        }
    }
    Ok(true)
}

/// (E S)² / E S², the Paley–Zygmund lower bound on Pr(S > 0).
pub fn paley_zygmund_bound(mean: f64, second_moment: f64) -> Result<f64, StatsError> {
    let mean_sq = mean * mean;
    if !(second_moment > 0.0) || second_moment < mean_sq * (1.0 - 1e-12) || mean < 0.0 {
        return Err(StatsError::InconsistentMoments {
            second: second_moment,
            mean_sq,
        });
    }
    Ok((mean_sq / second_moment).min(1.0))
}

/// Sample mean and standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

/// Mean, standard error (sample std / √n) in index order.
pub fn mean_se(values: &[f64]) -> MeanSe {
    let n = values.len();
    if n == 0 {
        return MeanSe {
            mean: f64::NAN,
            se: f64::NAN,
            count: 0,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    MeanSe { mean, se, count: n }
}

/// Sample variance with its standard error from the fourth central moment.
pub fn variance_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let var = m2 * n / (n - 1.0);
    (var, ((m4 - m2 * m2) / n).max(0.0).sqrt())
}

/// Sample covariance and a standard error from the spread of the products.
pub fn covariance_se(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let prods: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    let s = mean_se(&prods);
    (s.mean * n / (n - 1.0), s.se)
}

/// Ordinary least-squares line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub r_squared: f64,
}

pub fn ols_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit, StatsError> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return Err(StatsError::TooFewPoints { needed: 2, got: n.min(ys.len()) });
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= f64::EPSILON * xs.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE) {
        return Err(StatsError::DegeneratePredictor);
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let slope_se = if n > 2 { (rss / (nf - 2.0) / sxx).sqrt() } else { f64::NAN };
    let r_squared = if syy > 0.0 { 1.0 - rss / syy } else { 1.0 };
    Ok(LinearFit {
        slope,
        intercept,
        slope_se,
        r_squared,
    })
}

/// Fraction of samples strictly above each threshold.
pub fn exceedance(samples: &[f64], thresholds: &[f64]) -> Vec<f64> {
    let n = samples.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&c| samples.iter().filter(|&&s| s > c).count() as f64 / n)
        .collect()
}

/// Fit of ln(exceedance) against threshold. Fails if any frequency is zero.
pub fn log_linear_tail(thresholds: &[f64], fractions: &[f64]) -> Result<LinearFit, StatsError> {
    if let Some(i) = fractions.iter().position(|&f| f <= 0.0) {
        return Err(StatsError::TooFewPoints {
            needed: thresholds.len(),
            got: i,
        });
    }
    let logs: Vec<f64> = fractions.iter().map(|f| f.ln()).collect();
    ols_fit(thresholds, &logs)
}
