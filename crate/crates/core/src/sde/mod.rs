//! Euler–Maruyama integration of the stochastic sine equation
//!
//! ```text
//! dα_{λ,t} = λ·𝔣(t) dt + (cos α − 1) dB₁ + sin α dB₂,   α_{λ,0} = 0
//! ```
//!
//! for every signed λ of a grid, all driven by one shared Brownian path,
//! plus the scalar accelerated equation used under a Girsanov tilt.

mod noise;
mod policy;
mod tilted;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, ModelError, ModelParams};
use crate::trig::{half_angle, round_nearest};

pub use noise::{derive_stream, mix64, NoiseStream};
pub(crate) use policy::DriftSchedule;
pub use policy::{StepPolicy, DEFAULT_H0, DEFAULT_OUT_STRIDE, DEFAULT_REFINE_C};
pub use tilted::{integrate_tilted, integrate_tilted_with, Dynamics, TiltedPath};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
/// Steps between convergence and finiteness checks.
const CHECK_STRIDE: usize = 64;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid step policy: {0}")]
    InvalidPolicy(String),
    #[error("t_end {t_end} is shorter than the drift horizon T_x = {required}")]
    HorizonTooShort { t_end: f64, required: f64 },
    #[error("non-finite phase for lambda {lambda} detected at step {step}")]
    NonFinite { step: usize, lambda: f64 },
    #[error("lambda {0} is not on the ensemble grid")]
    UnknownLambda(f64),
    #[error("replay mismatch: {0}")]
    ReplayMismatch(String),
    #[error("path dump failed for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One integrator step as seen by observers: the phases passed alongside are
/// the values at the left end `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub index: usize,
    pub t: f64,
    pub h: f64,
    pub db1: f64,
    pub db2: f64,
    pub drifting: bool,
}

/// Receives every step of an integration in order.
pub trait StepObserver {
    fn observe(&mut self, step: &Step, phases: &[f64]);

    /// Called once with the terminal state.
    fn finish(&mut self, _t: f64, _phases: &[f64]) {}
}

impl StepObserver for () {
    fn observe(&mut self, _step: &Step, _phases: &[f64]) {}
}

/// Coupled phases α_{±λ,t} of one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEnsemble {
    pub beta: f64,
    pub lambda_grid: Vec<u32>,
    /// Ascending signed λ: −λ_n … −λ_1, λ_1 … λ_n. Column order of `frames`.
    pub signed: Vec<f64>,
    pub times: Vec<f64>,
    /// `frames[k][i]` = α_{signed[i]}(times[k]).
    pub frames: Vec<Vec<f64>>,
    /// Per signed λ: steps that crossed a multiple of 2π against the drift.
    pub violations: Vec<u32>,
    /// Per grid λ: terminal α_λ − α_{−λ} within `converge_tol` of 2πℤ.
    pub converged: Vec<bool>,
    pub drift_steps: usize,
    pub total_steps: usize,
    pub lambda_max: f64,
    pub refine: u32,
    pub policy: StepPolicy,
    pub noise: NoiseStream,
}

impl PhaseEnsemble {
    pub fn n_lambda(&self) -> usize {
        self.lambda_grid.len()
    }

    /// Column of +λ_i (grid index i).
    pub fn pos_index(&self, grid_index: usize) -> usize {
        self.n_lambda() + grid_index
    }

    /// Column of −λ_i (grid index i).
    pub fn neg_index(&self, grid_index: usize) -> usize {
        self.n_lambda() - 1 - grid_index
    }

    pub fn grid_index(&self, lambda: u32) -> Option<usize> {
        self.lambda_grid.binary_search(&lambda).ok()
    }

    pub fn column(&self, signed_lambda: f64) -> Option<usize> {
        self.signed.iter().position(|&l| l == signed_lambda)
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn terminal(&self) -> &[f64] {
        self.frames.last().unwrap()
    }

    /// Time series of α at one signed λ on the output grid.
    pub fn alpha(&self, signed_lambda: f64) -> Option<Vec<f64>> {
        let c = self.column(signed_lambda)?;
        Some(self.frames.iter().map(|f| f[c]).collect())
    }

    /// Terminal α_λ − α_{−λ} for grid index i.
    pub fn terminal_difference(&self, grid_index: usize) -> f64 {
        let f = self.terminal();
        f[self.pos_index(grid_index)] - f[self.neg_index(grid_index)]
    }

    /// Fraction of (frame, adjacent signed λ) pairs where the order is
    /// broken by more than `tol`.
    pub fn order_violation_fraction(&self, tol: f64) -> f64 {
        let mut bad = 0usize;
        let mut total = 0usize;
        for f in &self.frames {
            for w in f.windows(2) {
                total += 1;
                if w[0] > w[1] + tol {
                    bad += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            bad as f64 / total as f64
        }
    }

    /// Debug dump: header `t` then one column per signed λ in ascending order.
    pub fn write_paths_csv(&self, path: &Path) -> Result<(), SdeError> {
        let io = |source| SdeError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let mut header = String::from("t");
        for l in &self.signed {
            header.push_str(&format!(",{l}"));
        }
        writeln!(out, "{header}").map_err(io)?;
        for (t, f) in self.times.iter().zip(&self.frames) {
            let mut line = t.to_string();
            for a in f {
                line.push(',');
                line.push_str(&a.to_string());
            }
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Vectorizable Euler–Maruyama update for a block of phases.
pub(crate) struct PhaseKernel {
    lambdas: Vec<f64>,
    /// +1 for λ > 0, −1 otherwise; orients the barrier test.
    orient: Vec<f64>,
    pub(crate) alpha: Vec<f64>,
    floor_prev: Vec<f64>,
    pub(crate) violations: Vec<u32>,
}

impl PhaseKernel {
    pub(crate) fn new(lambdas: Vec<f64>) -> Self {
        let n = lambdas.len();
        let orient = lambdas.iter().map(|&l| if l > 0.0 { 1.0 } else { -1.0 }).collect();
        Self {
            lambdas,
            orient,
            alpha: vec![0.0; n],
            floor_prev: vec![0.0; n],
            violations: vec![0; n],
        }
    }

    /// α ← α + λ·drift_scale + (cos α − 1)·db1 + sin α·db2.
    #[inline]
    pub(crate) fn advance(&mut self, drift_scale: f64, db1: f64, db2: f64) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx2") {
                // SAFETY: the CPU supports AVX2, checked just above.
                unsafe { self.advance_avx2(drift_scale, db1, db2) };
                return;
            }
        }
        self.advance_portable(drift_scale, db1, db2);
    }

    // Same arithmetic compiled for wider vectors. No FMA contraction happens,
    // so results are bit-identical to the portable path.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn advance_avx2(&mut self, drift_scale: f64, db1: f64, db2: f64) {
        self.advance_body(drift_scale, db1, db2);
    }

    pub(crate) fn advance_portable(&mut self, drift_scale: f64, db1: f64, db2: f64) {
        self.advance_body(drift_scale, db1, db2);
    }

    #[inline(always)]
    fn advance_body(&mut self, drift_scale: f64, db1: f64, db2: f64) {
        let n = self.alpha.len();
        let (alpha, lam, orient) = (&mut self.alpha[..n], &self.lambdas[..n], &self.orient[..n]);
        let (floor_prev, viol) = (&mut self.floor_prev[..n], &mut self.violations[..n]);
        for i in 0..n {
            let a = alpha[i];
            let h = half_angle(a);
            viol[i] += ((floor_prev[i] - h.turn_floor) * orient[i] > 0.0) as u32;
            floor_prev[i] = h.turn_floor;
            alpha[i] = a + lam[i] * drift_scale + h.cos_minus_one() * db1 + h.sin() * db2;
        }
    }

    /// Account for a barrier crossed by the last step.
    pub(crate) fn close(&mut self) {
        for i in 0..self.alpha.len() {
            let floor = half_angle(self.alpha[i]).turn_floor;
            self.violations[i] += ((self.floor_prev[i] - floor) * self.orient[i] > 0.0) as u32;
            self.floor_prev[i] = floor;
        }
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.alpha.iter().position(|a| !a.is_finite())
    }
}

fn near_lattice(diff: f64, tol: f64) -> bool {
    let turns = diff / TWO_PI;
    (turns - round_nearest(turns)).abs() * TWO_PI <= tol
}

enum Stop {
    /// Relax until every pair converges or `relax_extra` elapses.
    Converge,
    /// Replay an earlier run's exact step counts.
    Exactly { drift_steps: usize, total_steps: usize },
}

struct Outcome {
    times: Vec<f64>,
    frames: Vec<Vec<f64>>,
    drift_steps: usize,
    total_steps: usize,
}

struct Driver<'a> {
    beta: f64,
    lambda_max: f64,
    policy: &'a StepPolicy,
    refine: u32,
    /// Column pairs (+λ, −λ) used for the convergence test.
    pairs: &'a [(usize, usize)],
}

impl Driver<'_> {
    fn run<O: StepObserver>(
        &self,
        kernel: &mut PhaseKernel,
        noise: &mut NoiseStream,
        stop: Stop,
        observer: &mut O,
    ) -> Result<Outcome, SdeError> {
        let policy = self.policy;
        let stride = policy.out_stride;
        let refine = self.refine.max(1);
        let per_sub = policy.substeps / refine;
        let mut times = vec![0.0];
        let mut frames = vec![kernel.alpha.clone()];
        let mut index = 0usize;
        let mut t_now = 0.0;

        let mut take = |kernel: &mut PhaseKernel,
                        noise: &mut NoiseStream,
                        t: f64,
                        h: f64,
                        drifting: bool,
                        index: &mut usize|
         -> Result<f64, SdeError> {
            let hs = h / refine as f64;
            for j in 0..refine {
                let ts = if j == 0 { t } else { t + j as f64 * hs };
                let (db1, db2) = noise.increment(hs, per_sub);
                let drift = if drifting { model::decay_rate(ts, self.beta) * hs } else { 0.0 };
                let step = Step {
                    index: *index,
                    t: ts,
                    h: hs,
                    db1,
                    db2,
                    drifting,
                };
                observer.observe(&step, &kernel.alpha);
                kernel.advance(drift, db1, db2);
            }
            *index += 1;
            if index.is_multiple_of(CHECK_STRIDE) {
                if let Some(i) = kernel.first_non_finite() {
                    return Err(SdeError::NonFinite {
                        step: *index,
                        lambda: kernel.lambdas[i],
                    });
                }
            }
            Ok(t + h)
        };

        let mut drift_steps = 0usize;
        for (t, h, t_next) in DriftSchedule::new(policy, self.lambda_max, self.beta) {
            if let Stop::Exactly { drift_steps: n, .. } = stop {
                if drift_steps == n {
                    break;
                }
            }
            take(kernel, noise, t, h, true, &mut index)?;
            t_now = t_next;
            drift_steps += 1;
            if stride > 0 && index.is_multiple_of(stride) {
                times.push(t_now);
                frames.push(kernel.alpha.clone());
            }
        }
        if let Stop::Exactly { drift_steps: n, .. } = stop {
            if drift_steps != n {
                return Err(SdeError::ReplayMismatch(format!(
                    "drift phase has {drift_steps} steps, expected {n}"
                )));
            }
        }

        let h = policy.relax_step();
        let relax_from = t_now;
        let converged_all = |k: &PhaseKernel| {
            self.pairs
                .iter()
                .all(|&(p, n)| near_lattice(k.alpha[p] - k.alpha[n], policy.converge_tol))
        };
        loop {
            match stop {
                Stop::Converge => {
                    if t_now - relax_from >= policy.relax_extra - 1e-12 {
                        break;
                    }
                    if (index - drift_steps).is_multiple_of(CHECK_STRIDE) && converged_all(kernel) {
                        break;
                    }
                }
                Stop::Exactly { total_steps, .. } => {
                    if index >= total_steps {
                        break;
                    }
                }
            }
            let step_h = match stop {
                Stop::Converge => h.min(relax_from + policy.relax_extra - t_now),
                Stop::Exactly { .. } => h,
            };
            t_now = take(kernel, noise, t_now, step_h, false, &mut index)?;
            if stride > 0 && index.is_multiple_of(stride) {
                times.push(t_now);
                frames.push(kernel.alpha.clone());
            }
        }
        kernel.close();
        if let Some(i) = kernel.first_non_finite() {
            return Err(SdeError::NonFinite {
                step: index,
                lambda: kernel.lambdas[i],
            });
        }
        if *times.last().unwrap() != t_now {
            times.push(t_now);
            frames.push(kernel.alpha.clone());
        }
        observer.finish(t_now, &kernel.alpha);
        Ok(Outcome {
            times,
            frames,
            drift_steps,
            total_steps: index,
        })
    }
}

fn signed_grid(grid: &[u32]) -> Vec<f64> {
    grid.iter()
        .rev()
        .map(|&l| -(l as f64))
        .chain(grid.iter().map(|&l| l as f64))
        .collect()
}

fn check_horizon(params: &ModelParams, policy: &StepPolicy) -> Result<(), SdeError> {
    let required = policy::model_horizon(params);
    if policy.t_end < required - 1e-12 {
        return Err(SdeError::HorizonTooShort {
            t_end: policy.t_end,
            required,
        });
    }
    Ok(())
}

/// Integrate the coupled ensemble ±λ for every λ on the grid.
pub fn integrate_ensemble(
    params: &ModelParams,
    policy: &StepPolicy,
    noise: &NoiseStream,
) -> Result<PhaseEnsemble, SdeError> {
    integrate_ensemble_observed(params, policy, noise, 1, &mut ())
}

/// Like [`integrate_ensemble`] but splits each scheduled step into `refine`
/// equal sub-steps (each consuming `substeps / refine` normal pairs) and
/// reports every sub-step to `observer`.
pub fn integrate_ensemble_observed<O: StepObserver>(
    params: &ModelParams,
    policy: &StepPolicy,
    noise: &NoiseStream,
    refine: u32,
    observer: &mut O,
) -> Result<PhaseEnsemble, SdeError> {
    params.validate()?;
    policy.validate()?;
    check_horizon(params, policy)?;
    integrate_unchecked(params, policy, noise, refine, observer)
}

/// Integrate on `[0, policy.t_end]` (plus any relaxation) without requiring
/// the horizon to pass the drift cutoff of the largest λ. Suitable for
/// martingale functionals on a finite window; the counting function of the
/// result is meaningless unless the horizon is long enough.
pub fn integrate_window<O: StepObserver>(
    params: &ModelParams,
    policy: &StepPolicy,
    noise: &NoiseStream,
    observer: &mut O,
) -> Result<PhaseEnsemble, SdeError> {
    params.validate()?;
    policy.validate()?;
    integrate_unchecked(params, policy, noise, 1, observer)
}

fn integrate_unchecked<O: StepObserver>(
    params: &ModelParams,
    policy: &StepPolicy,
    noise: &NoiseStream,
    refine: u32,
    observer: &mut O,
) -> Result<PhaseEnsemble, SdeError> {
    if refine == 0 || !policy.substeps.is_multiple_of(refine) {
        return Err(SdeError::InvalidPolicy(format!(
            "refine {refine} must divide substeps {}",
            policy.substeps
        )));
    }
    let signed = signed_grid(&params.lambda_grid);
    let n = params.lambda_grid.len();
    let pairs: Vec<(usize, usize)> = (0..n).map(|i| (n + i, n - 1 - i)).collect();
    let mut kernel = PhaseKernel::new(signed.clone());
    let mut stream = noise.rewound();
    let driver = Driver {
        beta: params.beta,
        lambda_max: params.lambda_max(),
        policy,
        refine,
        pairs: &pairs,
    };
    let out = driver.run(&mut kernel, &mut stream, Stop::Converge, observer)?;
    let last = out.frames.last().unwrap();
    let converged = pairs
        .iter()
        .map(|&(p, m)| near_lattice(last[p] - last[m], policy.converge_tol))
        .collect();
    Ok(PhaseEnsemble {
        beta: params.beta,
        lambda_grid: params.lambda_grid.clone(),
        signed,
        times: out.times,
        frames: out.frames,
        violations: kernel.violations,
        converged,
        drift_steps: out.drift_steps,
        total_steps: out.total_steps,
        lambda_max: params.lambda_max(),
        refine,
        policy: policy.clone(),
        noise: noise.rewound(),
    })
}

/// Re-integrate only ±λ on the ensemble's exact step grid with a replayed
/// noise stream, feeding every step to `observer`. Returns the replayed
/// terminal `(α_λ, α_{−λ})`. Fails if the stream or step counts differ from
/// the ensemble's, or if the replayed path departs from the stored frames.
pub fn replay_pair<O: StepObserver>(
    ensemble: &PhaseEnsemble,
    noise: &NoiseStream,
    lambda: u32,
    observer: &mut O,
) -> Result<(f64, f64), SdeError> {
    let gi = ensemble
        .grid_index(lambda)
        .ok_or(SdeError::UnknownLambda(lambda as f64))?;
    if noise.seed != ensemble.noise.seed
        || noise.stream_id != ensemble.noise.stream_id
        || noise.scale != ensemble.noise.scale
    {
        return Err(SdeError::ReplayMismatch("noise stream differs from the ensemble's".into()));
    }
    let l = lambda as f64;
    let mut kernel = PhaseKernel::new(vec![-l, l]);
    let mut stream = noise.rewound();
    let driver = Driver {
        beta: ensemble.beta,
        lambda_max: ensemble.lambda_max,
        policy: &ensemble.policy,
        refine: ensemble.refine,
        pairs: &[(1, 0)],
    };
    let stop = Stop::Exactly {
        drift_steps: ensemble.drift_steps,
        total_steps: ensemble.total_steps,
    };
    let out = driver.run(&mut kernel, &mut stream, stop, observer)?;
    if out.total_steps != ensemble.total_steps || out.times != ensemble.times {
        return Err(SdeError::ReplayMismatch(format!(
            "replayed {} steps, ensemble has {}",
            out.total_steps, ensemble.total_steps
        )));
    }
    let (pi, ni) = (ensemble.pos_index(gi), ensemble.neg_index(gi));
    for (k, f) in out.frames.iter().enumerate() {
        if f[1] != ensemble.frames[k][pi] || f[0] != ensemble.frames[k][ni] {
            return Err(SdeError::ReplayMismatch(format!(
                "replayed phase departs from the ensemble at t = {}",
                ensemble.times[k]
            )));
        }
    }
    Ok((kernel.alpha[1], kernel.alpha[0]))
}

#[cfg(test)]
mod tests;
