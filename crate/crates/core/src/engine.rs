//! Replica orchestration: deterministic parallel runs, ordered aggregation,
//! slope fits and persistence.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{self, ModelError, ModelParams};
use crate::sde::{self, derive_stream, SdeError, StepPolicy};
use crate::stats::{self, LinearFit, MeanSe, StatsError, TraceRecorder};
use crate::tilt;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("{failed} of {total} replicas failed (limit 10%); first error: {first}")]
    FailureThreshold { failed: usize, total: usize, first: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("worker pool: {0}")]
    Pool(String),
}

impl EngineError {
    fn config(field: &str, reason: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Girsanov sanity settings: mean of ℰ(ηM_{λ,t}) over untilted replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TiltSettings {
    pub eta: f64,
    pub t: f64,
    pub lambdas: Vec<u32>,
}

/// Everything that determines a run's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelParams,
    pub policy: StepPolicy,
    pub replicas: usize,
    pub seed: u64,
    /// (λ, μ) pairs whose cross-bracket is recorded at T_{max(λ,μ)}.
    #[serde(default)]
    pub pairs: Vec<(u32, u32)>,
    /// λ whose M and [M] are recorded at T_λ and at the end of the run.
    #[serde(default)]
    pub track: Vec<u32>,
    #[serde(default)]
    pub tilt: Option<TiltSettings>,
    /// Nested maxima: max over λ ≤ x for each x (defaults to x_max).
    #[serde(default)]
    pub x_list: Vec<u32>,
    /// λ written to counts.csv (defaults to the whole grid).
    #[serde(default)]
    pub count_lambdas: Option<Vec<u32>>,
}

impl RunConfig {
    pub fn new(model: ModelParams, replicas: usize, seed: u64) -> Self {
        let policy = StepPolicy::for_params(&model).with_out_stride(0);
        Self {
            model,
            policy,
            replicas,
            seed,
            pairs: Vec::new(),
            track: Vec::new(),
            tilt: None,
            x_list: Vec::new(),
            count_lambdas: None,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        self.model.validate().map_err(|e| match e {
            ModelError::InvalidBeta(_) => EngineError::config("beta", e.to_string()),
            _ => EngineError::config("model", e.to_string()),
        })?;
        self.policy.validate().map_err(|e| EngineError::config("policy", e.to_string()))?;
        let horizon = model::t_lambda(self.model.x_max as f64, self.model.beta).unwrap_or(0.0);
        if self.policy.t_end < horizon {
            return Err(EngineError::config(
                "policy.t_end",
                format!("{} is before the drift cutoff {horizon} of x_max", self.policy.t_end),
            ));
        }
        if self.replicas == 0 {
            return Err(EngineError::config("replicas", "must be at least 1"));
        }
        let on_grid = |l: u32| self.model.lambda_grid.binary_search(&l).is_ok();
        for &(l, m) in &self.pairs {
            if !on_grid(l) || !on_grid(m) {
                return Err(EngineError::config("pairs", format!("{l}:{m} is not on the grid")));
            }
        }
        if let Some(l) = self.track.iter().find(|l| !on_grid(**l)) {
            return Err(EngineError::config("track", format!("{l} is not on the grid")));
        }
        if let Some(t) = &self.tilt {
            if !t.eta.is_finite() {
                return Err(EngineError::config("tilt.eta", "must be finite"));
            }
            if !(t.t >= 0.0 && t.t <= self.policy.t_end) {
                return Err(EngineError::config("tilt.t", format!("{} is outside [0, t_end]", t.t)));
            }
            if let Some(l) = t.lambdas.iter().find(|l| !on_grid(**l)) {
                return Err(EngineError::config("tilt.lambdas", format!("{l} is not on the grid")));
            }
        }
        if let Some(&x) = self.x_list.iter().find(|&&x| x < self.model.lambda_grid[0] || x > self.model.x_max) {
            return Err(EngineError::config("x_list", format!("{x} is outside the grid")));
        }
        if let Some(ls) = &self.count_lambdas {
            if let Some(l) = ls.iter().find(|l| !on_grid(**l)) {
                return Err(EngineError::config("count_lambdas", format!("{l} is not on the grid")));
            }
        }
        Ok(())
    }

    pub fn effective_x_list(&self) -> Vec<u32> {
        if self.x_list.is_empty() {
            vec![self.model.x_max]
        } else {
            self.x_list.clone()
        }
    }

    /// Lowercase hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn cutoff(&self, l: u32) -> f64 {
        model::t_lambda(l as f64, self.model.beta).unwrap_or(0.0)
    }

    /// Step policy with breakpoints at every time a statistic is read.
    fn run_policy(&self) -> StepPolicy {
        let mut bps = self.policy.breakpoints.clone();
        bps.extend(self.pairs.iter().map(|&(l, m)| self.cutoff(l.max(m))));
        bps.extend(self.track.iter().map(|&l| self.cutoff(l)));
        if let Some(t) = &self.tilt {
            bps.push(t.t);
        }
        self.policy.clone().with_breakpoints(bps)
    }

    fn recorded_lambdas(&self) -> Vec<u32> {
        let mut ls: Vec<u32> = self.pairs.iter().flat_map(|&(l, m)| [l, m]).collect();
        ls.extend(&self.track);
        if let Some(t) = &self.tilt {
            ls.extend(&t.lambdas);
        }
        ls.sort_unstable();
        ls.dedup();
        ls
    }
}

/// Per-λ count row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub lambda: u32,
    pub n: i64,
    pub deviation: f64,
}

/// Cross-bracket row at t = T_{max(λ,μ)}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketRow {
    pub lambda: u32,
    pub mu: u32,
    pub t: f64,
    pub bracket: f64,
    pub cross_bracket: f64,
}

/// M_{λ,T_λ}, [M_λ]_{T_λ} and the terminal M_{λ,end}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleRow {
    pub lambda: u32,
    pub t_cut: f64,
    pub m_cut: f64,
    pub bracket_cut: f64,
    pub m_end: f64,
}

/// Nested maxima at one x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaximaRow {
    pub x: u32,
    pub max_dev: Option<f64>,
    pub one_sided_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaSummary {
    pub replica: usize,
    pub max_dev: Option<f64>,
    pub argmax: Option<u32>,
    pub one_sided_max: Option<f64>,
    pub nonconverged: usize,
    pub failed: bool,
    pub error: Option<String>,
    pub maxima: Vec<MaximaRow>,
    pub counts: Vec<CountRow>,
    pub brackets: Vec<BracketRow>,
    pub martingales: Vec<MartingaleRow>,
    /// (λ, log ℰ(ηM_{λ,t})) for the tilt settings.
    pub log_weights: Vec<(u32, f64)>,
}

impl ReplicaSummary {
    fn failed(replica: usize, error: String) -> Self {
        Self {
            replica,
            max_dev: None,
            argmax: None,
            one_sided_max: None,
            nonconverged: 0,
            failed: true,
            error: Some(error),
            maxima: Vec::new(),
            counts: Vec::new(),
            brackets: Vec::new(),
            martingales: Vec::new(),
            log_weights: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub config: RunConfig,
    pub per_replica: Vec<ReplicaSummary>,
    pub aggregates: BTreeMap<String, MeanSe>,
    pub fits: BTreeMap<String, LinearFit>,
}

fn run_replica(config: &RunConfig, policy: &StepPolicy, replica: usize) -> Result<ReplicaSummary, String> {
    let noise = derive_stream(config.seed, replica as u64);
    let recorded = config.recorded_lambdas();
    let mut rec = TraceRecorder::for_grid(config.model.beta, &config.model.lambda_grid, &recorded)
        .map_err(|e| e.to_string())?;
    let ens = sde::integrate_ensemble_observed(&config.model, policy, &noise, 1, &mut rec)
        .map_err(|e: SdeError| e.to_string())?;
    let traces = rec.into_traces();
    let trace = |l: u32| &traces[recorded.binary_search(&l).unwrap()];
    let counting = stats::counting_n(&ens);

    let maxima = config
        .effective_x_list()
        .iter()
        .map(|&x| MaximaRow {
            x,
            max_dev: counting.max_up_to(x).map(|m| m.0),
            one_sided_max: counting.one_sided_up_to(x),
        })
        .collect();
    let counts = match &config.count_lambdas {
        Some(ls) => ls
            .iter()
            .map(|&l| {
                let i = ens.grid_index(l).unwrap();
                CountRow {
                    lambda: l,
                    n: counting.n[i],
                    deviation: counting.deviation[i],
                }
            })
            .collect(),
        None => (0..counting.lambdas.len())
            .map(|i| CountRow {
                lambda: counting.lambdas[i],
                n: counting.n[i],
                deviation: counting.deviation[i],
            })
            .collect(),
    };
    let mut brackets = Vec::with_capacity(config.pairs.len());
    for &(l, m) in &config.pairs {
        let t = config.cutoff(l.max(m));
        let cb = stats::cross_bracket(trace(l), trace(m), &ens).map_err(|e| e.to_string())?;
        brackets.push(BracketRow {
            lambda: l,
            mu: m,
            t,
            bracket: trace(l).bracket_at(t).map_err(|e| e.to_string())?,
            cross_bracket: cb.at(t).map_err(|e| e.to_string())?,
        });
    }
    let mut martingales = Vec::with_capacity(config.track.len());
    for &l in &config.track {
        let tr = trace(l);
        let t = config.cutoff(l);
        martingales.push(MartingaleRow {
            lambda: l,
            t_cut: t,
            m_cut: tr.m_at(t).map_err(|e| e.to_string())?,
            bracket_cut: tr.bracket_at(t).map_err(|e| e.to_string())?,
            m_end: *tr.m.last().unwrap(),
        });
    }
    let mut log_weights = Vec::new();
    if let Some(ts) = &config.tilt {
        for &l in &ts.lambdas {
            let tr = trace(l);
            let m = tr.m_at(ts.t).map_err(|e| e.to_string())?;
            let b = tr.bracket_at(ts.t).map_err(|e| e.to_string())?;
            log_weights.push((l, tilt::girsanov_weight(m, b, ts.eta).map_err(|e| e.to_string())?.0));
        }
    }
    Ok(ReplicaSummary {
        replica,
        max_dev: counting.max_dev,
        argmax: counting.argmax,
        one_sided_max: counting.one_sided_max,
        nonconverged: counting.nonconverged,
        failed: false,
        error: None,
        maxima,
        counts,
        brackets,
        martingales,
        log_weights,
    })
}

/// Run every replica on a pool of `workers` threads (0 = rayon default).
/// Results land in replica-indexed slots, so the output does not depend on
/// the worker count.
pub fn run(config: &RunConfig, workers: usize) -> Result<ResultSet, EngineError> {
    run_with(config, workers, run_replica)
}

fn run_with<F>(config: &RunConfig, workers: usize, run_replica: F) -> Result<ResultSet, EngineError>
where
    F: Fn(&RunConfig, &StepPolicy, usize) -> Result<ReplicaSummary, String> + Sync,
{
    config.validate()?;
    let policy = config.run_policy();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| EngineError::Pool(e.to_string()))?;
    let per_replica: Vec<ReplicaSummary> = pool.install(|| {
        (0..config.replicas)
            .into_par_iter()
            .map(|r| run_replica(config, &policy, r).unwrap_or_else(|e| ReplicaSummary::failed(r, e)))
            .collect()
    });
    let failed: Vec<&ReplicaSummary> = per_replica.iter().filter(|r| r.failed).collect();
    if failed.len() * 10 > config.replicas {
        return Err(EngineError::FailureThreshold {
            failed: failed.len(),
            total: config.replicas,
            first: failed[0].error.clone().unwrap_or_default(),
        });
    }
    let aggregates = aggregate(&per_replica);
    let fits = scaling_fits(config, &aggregates)?;
    Ok(ResultSet {
        config: config.clone(),
        per_replica,
        aggregates,
        fits,
    })
}

/// Values collected in replica order; reduction is a single left fold, so
/// merging chunks and reducing equals reducing the whole sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OrderedValues {
    values: Vec<f64>,
}

impl OrderedValues {
    pub fn push(&mut self, v: f64) {
        self.values.push(v);
    }

    pub fn merge(mut self, other: OrderedValues) -> Self {
        self.values.extend(other.values);
        self
    }

    pub fn summary(&self) -> MeanSe {
        stats::mean_se(&self.values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl FromIterator<f64> for OrderedValues {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Self {
            values: iter.into_iter().collect(),
        }
    }
}

/// Aggregate key names.
pub fn max_key(x: u32) -> String {
    format!("max_dev@{x}")
}

pub fn one_sided_key(x: u32) -> String {
    format!("one_sided_max@{x}")
}

fn aggregate(per_replica: &[ReplicaSummary]) -> BTreeMap<String, MeanSe> {
    let mut acc: BTreeMap<String, OrderedValues> = BTreeMap::new();
    let mut put = |k: String, v: f64| acc.entry(k).or_default().push(v);
    for r in per_replica.iter().filter(|r| !r.failed) {
        put("nonconverged".into(), r.nonconverged as f64);
        for m in &r.maxima {
            if let Some(v) = m.max_dev {
                put(max_key(m.x), v);
            }
            if let Some(v) = m.one_sided_max {
                put(one_sided_key(m.x), v);
            }
        }
        for c in &r.counts {
            put(format!("N@{}", c.lambda), c.n as f64);
        }
        for b in &r.brackets {
            put(format!("bracket@{}:{}", b.lambda, b.mu), b.bracket);
            put(format!("cross_bracket@{}:{}", b.lambda, b.mu), b.cross_bracket);
        }
        for m in &r.martingales {
            put(format!("m_cut@{}", m.lambda), m.m_cut);
            put(format!("m_cut_sq@{}", m.lambda), m.m_cut * m.m_cut);
            put(format!("bracket_cut@{}", m.lambda), m.bracket_cut);
            put(format!("m_tail@{}", m.lambda), m.m_end - m.m_cut);
        }
        for &(l, lw) in &r.log_weights {
            put(format!("girsanov_weight@{l}"), lw.exp());
        }
    }
    acc.into_iter().map(|(k, v)| (k, v.summary())).collect()
}

/// Slopes of the mean maxima against ln x and ln x − ¾ ln ln x, when the
/// x list has at least three points with data.
fn scaling_fits(config: &RunConfig, agg: &BTreeMap<String, MeanSe>) -> Result<BTreeMap<String, LinearFit>, EngineError> {
    let mut fits = BTreeMap::new();
    let xs = config.effective_x_list();
    let series = |key: fn(u32) -> String| -> (Vec<f64>, Vec<f64>) {
        xs.iter()
            .filter_map(|&x| agg.get(&key(x)).map(|m| (x as f64, m.mean)))
            .filter(|(x, _)| *x > 1.0)
            .unzip()
    };
    for (name, key) in [("theorem1", max_key as fn(u32) -> String), ("one_sided", one_sided_key)] {
        let (x, y) = series(key);
        if x.len() < 3 {
            continue;
        }
        let ln: Vec<f64> = x.iter().map(|v| v.ln()).collect();
        let ll: Vec<f64> = x.iter().map(|&v| model::log_loglog_predictor(v)).collect();
        if let Ok(f) = stats::ols_fit(&ln, &y) {
            fits.insert(format!("{name}_slope"), f);
        }
        if let Ok(f) = stats::ols_fit(&ll, &y) {
            fits.insert(format!("{name}_corrected_slope"), f);
        }
    }
    Ok(fits)
}

/// Nested sweep: one run on the grid 1..=max(x_list) gives the maxima at
/// every x; requires an increasing list of at least four points.
pub fn scaling_sweep(config: &RunConfig, x_list: &[u32], workers: usize) -> Result<ResultSet, EngineError> {
    if x_list.len() < 4 {
        return Err(EngineError::config("x_list", format!("need at least 4 points, got {}", x_list.len())));
    }
    if x_list.windows(2).any(|w| w[0] >= w[1]) || x_list[0] < 2 {
        return Err(EngineError::config("x_list", "must be strictly increasing from at least 2"));
    }
    let x_max = *x_list.last().unwrap();
    let model = ModelParams::full_grid(config.model.beta, x_max).map_err(|e| EngineError::config("beta", e.to_string()))?;
    let mut policy = config.policy.clone();
    let need = model::t_lambda(x_max as f64, model.beta).unwrap_or(0.0);
    if policy.t_end < need {
        policy = StepPolicy {
            t_end: need + policy.relax_extra,
            ..policy
        };
    }
    let swept = RunConfig {
        model,
        policy,
        x_list: x_list.to_vec(),
        ..config.clone()
    };
    let out = run(&swept, workers)?;
    if !out.fits.contains_key("theorem1_slope") {
        return Err(StatsError::DegeneratePredictor.into());
    }
    Ok(out)
}

/// Crate version plus the `git describe` of the build, when available.
pub fn version_string() -> String {
    match option_env!("SINEBETA_GIT_DESCRIBE") {
        Some(g) if !g.is_empty() => format!("{}-{}", env!("CARGO_PKG_VERSION"), g),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

#[derive(Serialize, Deserialize)]
struct Summary {
    config: RunConfig,
    seed: u64,
    config_hash: String,
    aggregates: BTreeMap<String, MeanSe>,
    fits: BTreeMap<String, LinearFit>,
    failures: Vec<(usize, String)>,
    reference: BTreeMap<String, f64>,
    notes: BTreeMap<String, String>,
    /// Caller-supplied echo of the invocation (e.g. the effective CLI config).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    invocation: Option<serde_json::Value>,
    version: String,
}

pub const REPLICAS_CSV: &str = "replicas.csv";
pub const COUNTS_CSV: &str = "counts.csv";
pub const BRACKETS_CSV: &str = "brackets.csv";
pub const MARTINGALES_CSV: &str = "martingales.csv";
pub const MAXIMA_CSV: &str = "maxima.csv";
pub const WEIGHTS_CSV: &str = "weights.csv";
pub const SUMMARY_JSON: &str = "summary.json";

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

/// Write `bytes` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), EngineError> {
    let path = dir.join(name);
    let io = |source| EngineError::Io {
        path: path.clone(),
        source,
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.persist(&path).map_err(|e| io(e.error))?;
    Ok(())
}

/// Header plus rows as CSV bytes.
pub fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Write every output file of `results` under `dir` (created if missing).
pub fn persist(results: &ResultSet, dir: &Path) -> Result<(), EngineError> {
    persist_with(results, dir, None)
}

/// [`persist`] with an extra `invocation` object stored in summary.json.
pub fn persist_with(results: &ResultSet, dir: &Path, invocation: Option<serde_json::Value>) -> Result<(), EngineError> {
    fs::create_dir_all(dir).map_err(|source| EngineError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let reps = &results.per_replica;
    let replicas = csv_bytes(
        &["replica", "max_dev", "argmax_lambda", "one_sided_max", "nonconverged", "failed"],
        reps.iter().map(|r| {
            vec![
                r.replica.to_string(),
                opt(&r.max_dev),
                opt(&r.argmax),
                opt(&r.one_sided_max),
                r.nonconverged.to_string(),
                (r.failed as u8).to_string(),
            ]
        }),
    );
    write_atomic(dir, REPLICAS_CSV, &replicas)?;
    let counts = csv_bytes(
        &["replica", "lambda", "N", "deviation"],
        reps.iter().flat_map(|r| {
            r.counts
                .iter()
                .map(move |c| vec![r.replica.to_string(), c.lambda.to_string(), c.n.to_string(), c.deviation.to_string()])
        }),
    );
    write_atomic(dir, COUNTS_CSV, &counts)?;
    let maxima = csv_bytes(
        &["replica", "x", "max_dev", "one_sided_max"],
        reps.iter().flat_map(|r| {
            r.maxima
                .iter()
                .map(move |m| vec![r.replica.to_string(), m.x.to_string(), opt(&m.max_dev), opt(&m.one_sided_max)])
        }),
    );
    write_atomic(dir, MAXIMA_CSV, &maxima)?;
    if !results.config.pairs.is_empty() {
        let brackets = csv_bytes(
            &["replica", "lambda", "mu", "t", "bracket", "cross_bracket"],
            reps.iter().flat_map(|r| {
                r.brackets.iter().map(move |b| {
                    vec![
                        r.replica.to_string(),
                        b.lambda.to_string(),
                        b.mu.to_string(),
                        b.t.to_string(),
                        b.bracket.to_string(),
                        b.cross_bracket.to_string(),
                    ]
                })
            }),
        );
        write_atomic(dir, BRACKETS_CSV, &brackets)?;
    }
    if !results.config.track.is_empty() {
        let mart = csv_bytes(
            &["replica", "lambda", "t_cut", "m_cut", "bracket_cut", "m_end"],
            reps.iter().flat_map(|r| {
                r.martingales.iter().map(move |m| {
                    vec![
                        r.replica.to_string(),
                        m.lambda.to_string(),
                        m.t_cut.to_string(),
                        m.m_cut.to_string(),
                        m.bracket_cut.to_string(),
                        m.m_end.to_string(),
                    ]
                })
            }),
        );
        write_atomic(dir, MARTINGALES_CSV, &mart)?;
    }
    if results.config.tilt.is_some() {
        let weights = csv_bytes(
            &["replica", "lambda", "log_weight"],
            reps.iter().flat_map(|r| {
                r.log_weights
                    .iter()
                    .map(move |(l, w)| vec![r.replica.to_string(), l.to_string(), w.to_string()])
            }),
        );
        write_atomic(dir, WEIGHTS_CSV, &weights)?;
    }
    let beta = results.config.model.beta;
    let reference = BTreeMap::from([
        ("deviation_slope".to_string(), model::deviation_slope(beta)),
        ("martingale_slope".to_string(), model::martingale_slope(beta)),
        ("one_sided_slope".to_string(), model::one_sided_slope(beta)),
    ]);
    let notes = BTreeMap::from([
        (
            "max_statistics".to_string(),
            "lambda with a non-converged phase difference are excluded from max_dev and one_sided_max".to_string(),
        ),
        (
            "girsanov_weight".to_string(),
            "mean over untilted replicas of exp(eta*M_t - eta^2/2*[M]_t)".to_string(),
        ),
    ]);
    let summary = Summary {
        config: results.config.clone(),
        seed: results.config.seed,
        config_hash: results.config.hash(),
        aggregates: results.aggregates.clone(),
        fits: results.fits.clone(),
        failures: reps
            .iter()
            .filter(|r| r.failed)
            .map(|r| (r.replica, r.error.clone().unwrap_or_default()))
            .collect(),
        reference,
        notes,
        invocation,
        version: version_string(),
    };
    let mut json = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    json.push(b'\n');
    write_atomic(dir, SUMMARY_JSON, &json)
}

fn read_csv(dir: &Path, name: &str) -> Result<Vec<csv::StringRecord>, EngineError> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let parse = |reason: String| EngineError::Parse {
        path: path.clone(),
        reason,
    };
    let mut rd = csv::Reader::from_path(&path).map_err(|e| parse(e.to_string()))?;
    rd.records().map(|r| r.map_err(|e| parse(e.to_string()))).collect()
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<T, EngineError> {
    rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| EngineError::Parse {
        path: path.to_path_buf(),
        reason: format!("bad field {i} in {rec:?}"),
    })
}

fn opt_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<Option<T>, EngineError> {
    match rec.get(i) {
        Some("") => Ok(None),
        _ => field(rec, i, path).map(Some),
    }
}

/// Parse a directory written by [`persist`] back into a [`ResultSet`].
pub fn load(dir: &Path) -> Result<ResultSet, EngineError> {
    let spath = dir.join(SUMMARY_JSON);
    let text = fs::read_to_string(&spath).map_err(|source| EngineError::Io {
        path: spath.clone(),
        source,
    })?;
    let summary: Summary = serde_json::from_str(&text).map_err(|e| EngineError::Parse {
        path: spath.clone(),
        reason: e.to_string(),
    })?;
    let errors: BTreeMap<usize, String> = summary.failures.into_iter().collect();
    let p = dir.join(REPLICAS_CSV);
    let mut per_replica = Vec::new();
    for rec in read_csv(dir, REPLICAS_CSV)? {
        let replica: usize = field(&rec, 0, &p)?;
        per_replica.push(ReplicaSummary {
            replica,
            max_dev: opt_field(&rec, 1, &p)?,
            argmax: opt_field(&rec, 2, &p)?,
            one_sided_max: opt_field(&rec, 3, &p)?,
            nonconverged: field(&rec, 4, &p)?,
            failed: field::<u8>(&rec, 5, &p)? == 1,
            error: errors.get(&replica).cloned(),
            maxima: Vec::new(),
            counts: Vec::new(),
            brackets: Vec::new(),
            martingales: Vec::new(),
            log_weights: Vec::new(),
        });
    }
    let slot = |reps: &mut Vec<ReplicaSummary>, r: usize, path: &Path| -> Result<usize, EngineError> {
        reps.iter().position(|s| s.replica == r).ok_or_else(|| EngineError::Parse {
            path: path.to_path_buf(),
            reason: format!("replica {r} missing from {REPLICAS_CSV}"),
        })
    };
    let p = dir.join(COUNTS_CSV);
    for rec in read_csv(dir, COUNTS_CSV)? {
        let i = slot(&mut per_replica, field(&rec, 0, &p)?, &p)?;
        per_replica[i].counts.push(CountRow {
            lambda: field(&rec, 1, &p)?,
            n: field(&rec, 2, &p)?,
            deviation: field(&rec, 3, &p)?,
        });
    }
    let p = dir.join(MAXIMA_CSV);
    for rec in read_csv(dir, MAXIMA_CSV)? {
        let i = slot(&mut per_replica, field(&rec, 0, &p)?, &p)?;
        per_replica[i].maxima.push(MaximaRow {
            x: field(&rec, 1, &p)?,
            max_dev: opt_field(&rec, 2, &p)?,
            one_sided_max: opt_field(&rec, 3, &p)?,
        });
    }
    let p = dir.join(BRACKETS_CSV);
    for rec in read_csv(dir, BRACKETS_CSV)? {
        let i = slot(&mut per_replica, field(&rec, 0, &p)?, &p)?;
        per_replica[i].brackets.push(BracketRow {
            lambda: field(&rec, 1, &p)?,
            mu: field(&rec, 2, &p)?,
            t: field(&rec, 3, &p)?,
            bracket: field(&rec, 4, &p)?,
            cross_bracket: field(&rec, 5, &p)?,
        });
    }
    let p = dir.join(MARTINGALES_CSV);
    for rec in read_csv(dir, MARTINGALES_CSV)? {
        let i = slot(&mut per_replica, field(&rec, 0, &p)?, &p)?;
        per_replica[i].martingales.push(MartingaleRow {
            lambda: field(&rec, 1, &p)?,
            t_cut: field(&rec, 2, &p)?,
            m_cut: field(&rec, 3, &p)?,
            bracket_cut: field(&rec, 4, &p)?,
            m_end: field(&rec, 5, &p)?,
        });
    }
    let p = dir.join(WEIGHTS_CSV);
    for rec in read_csv(dir, WEIGHTS_CSV)? {
        let i = slot(&mut per_replica, field(&rec, 0, &p)?, &p)?;
        per_replica[i].log_weights.push((field(&rec, 1, &p)?, field(&rec, 2, &p)?));
    }
    Ok(ResultSet {
        config: summary.config,
        per_replica,
        aggregates: summary.aggregates,
        fits: summary.fits,
    })
}

/// Run `f` on a pool of `workers` threads (0 = rayon default).
pub fn with_workers<T: Send, F: FnOnce() -> T + Send>(workers: usize, f: F) -> Result<T, EngineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| EngineError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// One point of an exceedance curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub lambda: u32,
    pub c: f64,
    pub exceed_frac: f64,
    pub count: usize,
}

/// Fraction of replicas with M_{λ,end} − M_{λ,T_λ} > C for every tracked λ.
pub fn tail_curves(results: &ResultSet, c_list: &[f64]) -> Vec<TailRow> {
    results
        .config
        .track
        .iter()
        .flat_map(|&l| {
            let tails: Vec<f64> = results
                .per_replica
                .iter()
                .flat_map(|r| r.martingales.iter().filter(|m| m.lambda == l).map(|m| m.m_end - m.m_cut))
                .collect();
            stats::exceedance(&tails, c_list)
                .into_iter()
                .zip(c_list)
                .map(move |(f, &c)| TailRow {
                    lambda: l,
                    c,
                    exceed_frac: f,
                    count: tails.len(),
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Mean of sup_{t ≤ T} |∫ e^{iau} ds| over untilted difference paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscRow {
    pub lambda: u32,
    pub a: f64,
    pub t: f64,
    pub mean_sup: f64,
    pub se: f64,
    pub count: usize,
    /// Mean sup times λ: flat under the 1/λ decay.
    pub scaled: f64,
}

pub fn oscillation_sweep(
    lambdas: &[u32],
    a: f64,
    t: f64,
    beta: f64,
    replicas: usize,
    seed: u64,
) -> Result<Vec<OscRow>, tilt::TiltError> {
    lambdas
        .iter()
        .map(|&l| {
            let spec = tilt::TiltSpec::new(l as f64, 0.0, beta, t).with_out_stride(1);
            let sups = tilt::map_paths(&spec, replicas, seed, 0, |p| Ok(stats::oscillatory_sup(&p.times, &p.u, a, t)))?;
            let s = stats::mean_se(&sups);
            Ok(OscRow {
                lambda: l,
                a,
                t,
                mean_sup: s.mean,
                se: s.se,
                count: s.count,
                scaled: s.mean * l as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
