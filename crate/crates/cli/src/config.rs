//! Flat JSON config merged with command-line flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};

/// A usage or configuration error; exits with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn bad(field: &str, reason: impl std::fmt::Display) -> anyhow::Error {
    ConfigError(format!("invalid config: {field}: {reason}")).into()
}

/// Keys shared by the config file and the flags. Every key is optional;
/// each subcommand fills in its own defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Inverse temperature β > 0.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Largest λ (the range is 1..=x).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<u32>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicas: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Largest step size.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h0: Option<f64>,
    /// Stiff-phase rotation per step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine_c: Option<f64>,
    /// Tube radius R.
    #[arg(long = "R")]
    #[serde(rename = "R", skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    /// Tilt η.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Cross-bracket pairs, e.g. "55:62,55:120".
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<String>,
    /// Comma-separated x values for sweeps.
    #[arg(long = "x-list", value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_list: Option<Vec<u32>>,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<u32>>,
    /// Time horizon.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    /// Frequency a of the oscillatory integral.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    /// Comma-separated tail thresholds C.
    #[arg(long = "c-list", value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_list: Option<Vec<f64>>,
    /// Worker threads (0 = all cores). Does not change any output.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl Settings {
    /// Values in `flags` take precedence over `self`.
    pub fn overlay(mut self, flags: &Settings) -> Self {
        overlay!(self, flags; beta, x, replicas, seed, out, h0, refine_c, r, eta, pairs, x_list, lambdas, t, a, c_list, workers);
        self
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("invalid config file {}: {e}", path.display())).into())
    }

    pub fn beta(&self, default: f64) -> anyhow::Result<f64> {
        let b = self.beta.unwrap_or(default);
        if !(b.is_finite() && b > 0.0) {
            return Err(bad("beta", format!("must be positive and finite, got {b}")));
        }
        Ok(b)
    }

    pub fn replicas(&self, default: usize) -> anyhow::Result<usize> {
        let n = self.replicas.unwrap_or(default);
        if n == 0 {
            return Err(bad("replicas", "must be at least 1"));
        }
        Ok(n)
    }

    pub fn x(&self, default: u32) -> anyhow::Result<u32> {
        let x = self.x.unwrap_or(default);
        if x == 0 {
            return Err(bad("x", "must be at least 1"));
        }
        Ok(x)
    }

    pub fn positive(&self, field: &str, value: Option<f64>, default: f64) -> anyhow::Result<f64> {
        let v = value.unwrap_or(default);
        if !(v.is_finite() && v > 0.0) {
            return Err(bad(field, format!("must be positive and finite, got {v}")));
        }
        Ok(v)
    }

    pub fn out(&self, subcommand: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(subcommand))
    }

    pub fn pair_list(&self, default: &str) -> anyhow::Result<Vec<(u32, u32)>> {
        parse_pairs(self.pairs.as_deref().unwrap_or(default))
    }
}

/// Parse "55:62,55:120".
pub fn parse_pairs(text: &str) -> anyhow::Result<Vec<(u32, u32)>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (l, m) = item
                .split_once(':')
                .ok_or_else(|| bad("pairs", format!("expected lambda:mu, got {item:?}")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<u32>()
                    .ok()
                    .filter(|v| *v >= 1)
                    .ok_or_else(|| bad("pairs", format!("{s:?} is not a positive integer")))
            };
            Ok((parse(l)?, parse(m)?))
        })
        .collect()
}
