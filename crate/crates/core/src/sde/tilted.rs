use serde::{Deserialize, Serialize};

use crate::model;

use super::{DriftSchedule, NoiseStream, SdeError, StepPolicy};

/// Diffusion used for the phase difference `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dynamics {
    /// `du = 2λ𝔣 dt + 2η sin²(u/2) dt + 2 sin(u/2) dX`.
    SineEquation,
    /// `sin(u/2)` replaced by 1: `du = 2λ𝔣 dt + 2η dt + 2 dX`. Test hook with
    /// Gaussian martingale part.
    ConstantDiffusion,
}

/// A path of the accelerated stochastic sine equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltedPath {
    pub eta: f64,
    pub lambda: f64,
    pub beta: f64,
    pub times: Vec<f64>,
    pub u: Vec<f64>,
    /// ∫ 2 sin(u/2) dX: the martingale part of `u` under the tilted measure.
    pub m_part: Vec<f64>,
    /// ∫ 4 sin²(u/2) ds.
    pub bracket: Vec<f64>,
}

impl TiltedPath {
    /// The untilted martingale M_λ reconstructed along the path:
    /// `m_part + (η/2)·bracket`, i.e. the martingale part plus the tilt drift
    /// ∫ 2η sin²(u/2) ds.
    pub fn martingale(&self) -> Vec<f64> {
        self.m_part
            .iter()
            .zip(&self.bracket)
            .map(|(m, b)| m + 0.5 * self.eta * b)
            .collect()
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn terminal_martingale(&self) -> f64 {
        self.m_part.last().unwrap() + 0.5 * self.eta * self.bracket.last().unwrap()
    }

    pub fn terminal_bracket(&self) -> f64 {
        *self.bracket.last().unwrap()
    }
}

/// Integrate the accelerated equation on `[0, policy.t_end]` (no relaxation
/// phase). The driving `dX` is the first component of each noise pair; the
/// step control uses Λ = 2|λ|, the drift of `u`.
pub fn integrate_tilted(
    lambda: f64,
    eta: f64,
    beta: f64,
    policy: &StepPolicy,
    noise: &NoiseStream,
) -> Result<TiltedPath, SdeError> {
    integrate_tilted_with(lambda, eta, beta, policy, noise, Dynamics::SineEquation)
}

pub fn integrate_tilted_with(
    lambda: f64,
    eta: f64,
    beta: f64,
    policy: &StepPolicy,
    noise: &NoiseStream,
    dynamics: Dynamics,
) -> Result<TiltedPath, SdeError> {
    model::drift_rate(lambda, 0.0, beta)?;
    if !eta.is_finite() {
        return Err(SdeError::InvalidPolicy(format!("eta must be finite, got {eta}")));
    }
    policy.validate()?;
    let mut stream = noise.rewound();
    let stride = policy.out_stride;
    let (mut u, mut m, mut br) = (0.0f64, 0.0f64, 0.0f64);
    let mut path = TiltedPath {
        eta,
        lambda,
        beta,
        times: vec![0.0],
        u: vec![0.0],
        m_part: vec![0.0],
        bracket: vec![0.0],
    };
    let mut index = 0usize;
    let mut t_now = 0.0;
    for (t, h, t_next) in DriftSchedule::new(policy, 2.0 * lambda.abs(), beta) {
        let (dx, _) = stream.increment(h, policy.substeps);
        let s = match dynamics {
            Dynamics::SineEquation => libm::sin(0.5 * u),
            Dynamics::ConstantDiffusion => 1.0,
        };
        let s2 = s * s;
        let dm = 2.0 * s * dx;
        u += 2.0 * lambda * model::decay_rate(t, beta) * h + 2.0 * eta * s2 * h + dm;
        m += dm;
        br += 4.0 * s2 * h;
        index += 1;
        t_now = t_next;
        if !u.is_finite() {
            return Err(SdeError::NonFinite { step: index, lambda });
        }
        if stride > 0 && index.is_multiple_of(stride) {
            path.times.push(t_now);
            path.u.push(u);
            path.m_part.push(m);
            path.bracket.push(br);
        }
    }
    if *path.times.last().unwrap() != t_now {
        path.times.push(t_now);
        path.u.push(u);
        path.m_part.push(m);
        path.bracket.push(br);
    }
    Ok(path)
}
