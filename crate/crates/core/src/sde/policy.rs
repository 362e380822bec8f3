use serde::{Deserialize, Serialize};

use crate::model::{self, ModelParams};

use super::SdeError;

/// Time-step control shared by every phase of one integration.
///
/// The step at time `t` is `min(h0, refine_c / (1 + Λ·𝔣(t)))`, Λ the largest
/// |λ| integrated, so the per-step rotation of the fastest phase stays below
/// `refine_c` while the drift is stiff and relaxes to `h0` once it decays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPolicy {
    pub h0: f64,
    pub refine_c: f64,
    /// End of the drifted integration.
    pub t_end: f64,
    /// Maximum drift-free continuation after `t_end`.
    pub relax_extra: f64,
    /// Distance to 2πℤ below which a phase difference counts as converged.
    pub converge_tol: f64,
    /// Record a frame every `out_stride` steps; 0 keeps only the endpoints.
    pub out_stride: usize,
    /// Standard-normal pairs aggregated into each step's increment.
    pub substeps: u32,
    /// Times the step grid must land on exactly (e.g. cutoff times T_λ).
    #[serde(default)]
    pub breakpoints: Vec<f64>,
}

pub const DEFAULT_H0: f64 = 0.01;
pub const DEFAULT_REFINE_C: f64 = 0.1;
pub const DEFAULT_OUT_STRIDE: usize = 100;

impl StepPolicy {
    /// Defaults for a model: drift runs to T_{x_max} + 10·(4/β), then up to
    /// another 10·(4/β) of drift-free relaxation.
    pub fn for_params(params: &ModelParams) -> Self {
        Self::for_beta(params.beta, params.x_max as f64)
    }

    pub fn for_beta(beta: f64, x_max: f64) -> Self {
        let relax = 10.0 * 4.0 / beta;
        let horizon = 4.0 / beta * x_max.max(1.0).ln();
        Self {
            h0: DEFAULT_H0,
            refine_c: DEFAULT_REFINE_C,
            t_end: horizon + relax,
            relax_extra: relax,
            converge_tol: 0.05 * 2.0 * std::f64::consts::PI,
            out_stride: DEFAULT_OUT_STRIDE,
            substeps: 1,
            breakpoints: Vec::new(),
        }
    }

    /// A policy that stops at `t_end` with no relaxation phase.
    pub fn until(beta: f64, lambda_max: f64, t_end: f64) -> Self {
        let mut p = Self::for_beta(beta, lambda_max);
        p.t_end = t_end;
        p.relax_extra = 0.0;
        p
    }

    pub fn with_h0(mut self, h0: f64) -> Self {
        self.h0 = h0;
        self
    }

    pub fn with_refine_c(mut self, c: f64) -> Self {
        self.refine_c = c;
        self
    }

    pub fn with_out_stride(mut self, stride: usize) -> Self {
        self.out_stride = stride;
        self
    }

    pub fn with_breakpoints(mut self, mut points: Vec<f64>) -> Self {
        points.retain(|t| t.is_finite() && *t > 0.0);
        points.sort_by(|a, b| a.partial_cmp(b).unwrap());
        points.dedup();
        self.breakpoints = points;
        self
    }

    pub fn validate(&self) -> Result<(), SdeError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(SdeError::InvalidPolicy(format!("{name} must be positive, got {v}")))
            }
        };
        positive("h0", self.h0)?;
        positive("refine_c", self.refine_c)?;
        positive("converge_tol", self.converge_tol)?;
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return Err(SdeError::InvalidPolicy(format!("t_end must be nonnegative, got {}", self.t_end)));
        }
        if !(self.relax_extra.is_finite() && self.relax_extra >= 0.0) {
            return Err(SdeError::InvalidPolicy(format!(
                "relax_extra must be nonnegative, got {}",
                self.relax_extra
            )));
        }
        if self.substeps == 0 {
            return Err(SdeError::InvalidPolicy("substeps must be at least 1".into()));
        }
        Ok(())
    }

    /// h(t) while the drift is on.
    #[inline]
    pub fn step_size(&self, t: f64, lambda_max: f64, beta: f64) -> f64 {
        let stiff = self.refine_c / (1.0 + lambda_max * model::decay_rate(t, beta));
        self.h0.min(stiff)
    }

    /// h during the drift-free phase.
    pub fn relax_step(&self) -> f64 {
        self.h0.min(self.refine_c)
    }
}

/// Generates the drifted part of the step grid: `(t, h)` pairs ending exactly
/// at `t_end` and landing on every breakpoint inside it.
#[derive(Debug, Clone)]
pub(crate) struct DriftSchedule<'a> {
    policy: &'a StepPolicy,
    lambda_max: f64,
    beta: f64,
    t: f64,
    next_break: usize,
}

// Steps shorter than this are merged into the previous one.
const SNAP: f64 = 1e-12;

impl<'a> DriftSchedule<'a> {
    pub(crate) fn new(policy: &'a StepPolicy, lambda_max: f64, beta: f64) -> Self {
        Self {
            policy,
            lambda_max,
            beta,
            t: 0.0,
            next_break: 0,
        }
    }
}

impl Iterator for DriftSchedule<'_> {
    /// `(t, h, t + h)`, the last entry snapped onto breakpoints.
    type Item = (f64, f64, f64);

    fn next(&mut self) -> Option<(f64, f64, f64)> {
        let end = self.policy.t_end;
        if self.t >= end - SNAP {
            return None;
        }
        let bps = &self.policy.breakpoints;
        while self.next_break < bps.len() && bps[self.next_break] <= self.t + SNAP {
            self.next_break += 1;
        }
        let target = match bps.get(self.next_break) {
            Some(&b) if b < end => b,
            _ => end,
        };
        let mut h = self.policy.step_size(self.t, self.lambda_max, self.beta);
        if self.t + h > target - SNAP {
            h = target - self.t;
        }
        let t = self.t;
        self.t = if h == target - t { target } else { t + h };
        Some((t, h, self.t))
    }
}

pub(crate) fn model_horizon(params: &ModelParams) -> f64 {
    model::t_lambda(params.x_max as f64, params.beta).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_non_decreasing() {
        let p = StepPolicy::for_beta(2.0, 4096.0);
        let mut prev = 0.0;
        for i in 0..4000 {
            let h = p.step_size(i as f64 * 0.01, 4096.0, 2.0);
            assert!(h > 0.0 && h >= prev);
            prev = h;
        }
        assert_eq!(p.step_size(100.0, 4096.0, 2.0), p.h0);
    }

    #[test]
    fn schedule_hits_breakpoints_and_end() {
        let p = StepPolicy::until(2.0, 64.0, 3.0).with_breakpoints(vec![0.5, 1.234_567, 2.0, 7.0]);
        let steps: Vec<_> = DriftSchedule::new(&p, 64.0, 2.0).collect();
        for b in [0.5, 1.234_567, 2.0] {
            assert!(steps.iter().any(|s| s.0 == b), "breakpoint {b} missing");
        }
        assert_eq!(steps.last().unwrap().2, 3.0);
        for w in steps.windows(2) {
            assert_eq!(w[0].2, w[1].0);
            assert!((w[0].0 + w[0].1 - w[1].0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_schedule_when_t_end_zero() {
        let p = StepPolicy::until(2.0, 1.0, 0.0);
        assert_eq!(DriftSchedule::new(&p, 1.0, 2.0).count(), 0);
    }

    #[test]
    fn validation() {
        assert!(StepPolicy::for_beta(2.0, 8.0).validate().is_ok());
        assert!(StepPolicy::for_beta(2.0, 8.0).with_h0(0.0).validate().is_err());
        let mut p = StepPolicy::for_beta(2.0, 8.0);
        p.substeps = 0;
        assert!(p.validate().is_err());
    }
}
