//! `sinebeta`: command-line experiments on the stochastic sine equation.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use sinebeta::engine::{self, EngineError, RunConfig, TiltSettings};
use sinebeta::model::{self, ModelParams};
use sinebeta::{gaussian, stats, tilt};

use config::{bad, ConfigError, Settings};

#[derive(Parser)]
#[command(name = "sinebeta", version, about = "Monte Carlo experiments for the Sine-beta counting process")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Counting function, maximal deviation and optional brackets for one x.
    Simulate(Invocation),
    /// Nested sweep of the maximal deviation over an x list with slope fits.
    MaxScaling(Invocation),
    /// Mean cross-brackets of selected (λ, μ) pairs.
    Covariance(Invocation),
    /// Maxima of the Gaussian comparison field against the log-correlated centering.
    Gaussian(Invocation),
    /// Girsanov weights, importance sampling and tube diagnostics.
    Tilt(Invocation),
    /// Exceedance curves of M_{λ,end} − M_{λ,T_λ}.
    Tails(Invocation),
    /// Decay of oscillatory integrals of the phase difference.
    Osc(Invocation),
}

#[derive(Args)]
struct Invocation {
    /// Flat JSON config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: Settings,
}

impl Invocation {
    fn settings(&self) -> Result<Settings> {
        let base = match &self.config {
            Some(p) => Settings::from_file(p)?,
            None => Settings::default(),
        };
        Ok(base.overlay(&self.flags))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(inv) => inv.settings().and_then(|s| simulate(&s)),
        Command::MaxScaling(inv) => inv.settings().and_then(|s| max_scaling(&s)),
        Command::Covariance(inv) => inv.settings().and_then(|s| covariance(&s)),
        Command::Gaussian(inv) => inv.settings().and_then(|s| gaussian_cmd(&s)),
        Command::Tilt(inv) => inv.settings().and_then(|s| tilt_cmd(&s)),
        Command::Tails(inv) => inv.settings().and_then(|s| tails(&s)),
        Command::Osc(inv) => inv.settings().and_then(|s| osc(&s)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<EngineError>() {
        Some(EngineError::Config { .. }) => 2,
        Some(EngineError::FailureThreshold { .. }) => 3,
        _ => 1,
    }
}

/// The settings echoed to summary.json: everything that shapes the output,
/// without the output directory and worker count.
fn echo(s: &Settings) -> Value {
    let mut e = s.clone();
    e.out = None;
    e.workers = None;
    serde_json::to_value(e).expect("settings serialize")
}

fn workers(s: &Settings) -> usize {
    s.workers.unwrap_or(0)
}

fn model_params(beta: f64, grid: Vec<u32>) -> Result<ModelParams> {
    ModelParams::with_grid(beta, grid).map_err(|e| bad("lambdas", e))
}

fn base_config(s: &Settings, model: ModelParams, replicas: usize, seed: u64) -> Result<(RunConfig, Settings)> {
    let h0 = s.positive("h0", s.h0, sinebeta::sde::DEFAULT_H0)?;
    let refine_c = s.positive("refine_c", s.refine_c, sinebeta::sde::DEFAULT_REFINE_C)?;
    let mut cfg = RunConfig::new(model, replicas, seed);
    cfg.policy = cfg.policy.with_h0(h0).with_refine_c(refine_c);
    let resolved = Settings {
        beta: Some(cfg.model.beta),
        replicas: Some(replicas),
        seed: Some(seed),
        h0: Some(h0),
        refine_c: Some(refine_c),
        ..s.clone()
    };
    Ok((cfg, resolved))
}

fn print_row(cells: &[String]) {
    let line: Vec<String> = cells.iter().map(|c| format!("{c:>14}")).collect();
    println!("{}", line.join(""));
}

fn headline(res: &engine::ResultSet) {
    let beta = res.config.model.beta;
    if let Some(f) = res.fits.get("theorem1_slope") {
        println!(
            "max deviation slope vs ln x: {:.4} ± {:.4}   (limit 2/(√β π) = {:.5})",
            f.slope,
            f.slope_se,
            model::deviation_slope(beta)
        );
    }
    if let Some(f) = res.fits.get("theorem1_corrected_slope") {
        println!("slope vs ln x − ¾ ln ln x:   {:.4} ± {:.4}", f.slope, f.slope_se);
    }
    if let Some(f) = res.fits.get("one_sided_slope") {
        println!(
            "one-sided slope vs ln x:     {:.4} ± {:.4}   (limit 4/√(2β) = {:.5})",
            f.slope,
            f.slope_se,
            model::one_sided_slope(beta)
        );
    }
}

fn max_table(res: &engine::ResultSet) {
    print_row(&["x", "mean max D", "SE", "max D / ln x", "one-sided"].map(String::from));
    for x in res.config.effective_x_list() {
        let Some(m) = res.aggregates.get(&engine::max_key(x)) else { continue };
        let os = res
            .aggregates
            .get(&engine::one_sided_key(x))
            .map(|o| format!("{:.4}", o.mean))
            .unwrap_or_default();
        let ratio = if x > 1 { format!("{:.4}", m.mean / (x as f64).ln()) } else { "-".into() };
        print_row(&[x.to_string(), format!("{:.4}", m.mean), format!("{:.4}", m.se), ratio, os]);
    }
    let failed = res.per_replica.iter().filter(|r| r.failed).count();
    let nonconv = res.aggregates.get("nonconverged").map(|m| m.mean).unwrap_or(0.0);
    println!("replicas: {}  failed: {failed}  mean non-converged λ per replica: {nonconv:.3}", res.per_replica.len());
}

fn finish_run(res: &engine::ResultSet, out: &Path, resolved: &Settings) -> Result<()> {
    engine::persist_with(res, out, Some(echo(resolved)))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn simulate(s: &Settings) -> Result<()> {
    let beta = s.beta(2.0)?;
    let x = s.x(64)?;
    let model = ModelParams::full_grid(beta, x).map_err(|e| bad("x", e))?;
    let (mut cfg, mut resolved) = base_config(s, model, s.replicas(100)?, s.seed.unwrap_or(0))?;
    resolved.x = Some(x);
    cfg.pairs = s.pair_list("")?;
    cfg.x_list = s.x_list.clone().unwrap_or_default();
    cfg.track = s.lambdas.clone().unwrap_or_default();
    if let Some(eta) = s.eta {
        let lambdas = s.lambdas.clone().unwrap_or_else(|| vec![x]);
        let t = s.t.unwrap_or_else(|| model::t_lambda(lambdas[0] as f64, beta).unwrap_or(0.0));
        resolved.t = Some(t);
        cfg.tilt = Some(TiltSettings { eta, t, lambdas });
    }
    let res = engine::run(&cfg, workers(s))?;
    max_table(&res);
    headline(&res);
    finish_run(&res, &s.out("simulate"), &resolved)
}

fn max_scaling(s: &Settings) -> Result<()> {
    let beta = s.beta(2.0)?;
    let x_list = s.x_list.clone().unwrap_or_else(|| vec![64, 128, 256, 512]);
    let x_max = *x_list.iter().max().ok_or_else(|| bad("x_list", "must not be empty"))?;
    let model = ModelParams::full_grid(beta, x_max).map_err(|e| bad("x_list", e))?;
    let (mut cfg, mut resolved) = base_config(s, model, s.replicas(200)?, s.seed.unwrap_or(0))?;
    resolved.x_list = Some(x_list.clone());
    cfg.count_lambdas = Some(x_list.clone());
    let res = engine::scaling_sweep(&cfg, &x_list, workers(s))?;
    max_table(&res);
    headline(&res);
    finish_run(&res, &s.out("max-scaling"), &resolved)
}

/// 2(T_μ − (4/β) ln₊|λ − μ|) at T = T_{max(λ,μ)}.
fn cross_prediction(l: u32, m: u32, beta: f64) -> f64 {
    let t = model::t_lambda(l.max(m) as f64, beta).unwrap_or(0.0);
    let gap = (l as f64 - m as f64).abs();
    2.0 * (t - 4.0 / beta * gap.ln().max(0.0))
}

fn covariance(s: &Settings) -> Result<()> {
    let beta = s.beta(2.0)?;
    let pairs = s.pair_list("55:56,55:58,55:63,55:76")?;
    if pairs.is_empty() {
        return Err(bad("pairs", "at least one pair is required"));
    }
    let mut grid: Vec<u32> = pairs.iter().flat_map(|&(l, m)| [l, m]).collect();
    grid.sort_unstable();
    grid.dedup();
    let (mut cfg, mut resolved) = base_config(s, model_params(beta, grid)?, s.replicas(1000)?, s.seed.unwrap_or(0))?;
    resolved.pairs = Some(pairs.iter().map(|(l, m)| format!("{l}:{m}")).collect::<Vec<_>>().join(","));
    cfg.pairs = pairs.clone();
    let res = engine::run(&cfg, workers(s))?;
    print_row(&["lambda:mu", "t", "mean cross", "SE", "prediction"].map(String::from));
    for &(l, m) in &pairs {
        let agg = &res.aggregates[&format!("cross_bracket@{l}:{m}")];
        let t = model::t_lambda(l.max(m) as f64, beta).unwrap_or(0.0);
        print_row(&[
            format!("{l}:{m}"),
            format!("{t:.4}"),
            format!("{:.4}", agg.mean),
            format!("{:.4}", agg.se),
            format!("{:.4}", cross_prediction(l, m, beta)),
        ]);
    }
    finish_run(&res, &s.out("covariance"), &resolved)
}

fn write_summary(dir: &Path, subcommand: &str, resolved: &Settings, results: Value) -> Result<()> {
    let summary = json!({
        "subcommand": subcommand,
        "seed": resolved.seed,
        "invocation": echo(resolved),
        "results": results,
        "version": engine::version_string(),
    });
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    engine::write_atomic(dir, engine::SUMMARY_JSON, &bytes)?;
    Ok(())
}

fn create_out(s: &Settings, name: &str) -> Result<PathBuf> {
    let out = s.out(name);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn gaussian_cmd(s: &Settings) -> Result<()> {
    let beta = s.beta(2.0)?;
    let replicas = s.replicas(200)?;
    let seed = s.seed.unwrap_or(0);
    let x_list = s.x_list.clone().unwrap_or_else(|| vec![64, 128, 256, 512, 1024]);
    if x_list.is_empty() || x_list.contains(&0) {
        return Err(bad("x_list", "must be a nonempty list of positive integers"));
    }
    let pairs = s.pair_list("")?;
    let resolved = Settings {
        beta: Some(beta),
        replicas: Some(replicas),
        seed: Some(seed),
        x_list: Some(x_list.clone()),
        ..s.clone()
    };
    let out = create_out(s, "gaussian")?;
    let diag = engine::with_workers(workers(s), || gaussian::gaussian_max_sweep(&x_list, beta, replicas, seed, None))??;
    print_row(&["x", "mean max G", "SE", "centering", "residual"].map(String::from));
    for d in &diag {
        print_row(&[
            d.x.to_string(),
            format!("{:.4}", d.mean_max),
            format!("{:.4}", d.se),
            format!("{:.4}", d.centering),
            format!("{:.4}", d.residual),
        ]);
    }
    let rows = diag.iter().map(|d| {
        vec![
            d.x.to_string(),
            d.mean_max.to_string(),
            d.se.to_string(),
            d.count.to_string(),
            d.centering.to_string(),
            d.residual.to_string(),
        ]
    });
    let csv = engine::csv_bytes(&["x", "mean_max", "se", "count", "centering", "residual"], rows);
    engine::write_atomic(&out, "gaussian.csv", &csv)?;

    let fitted: Vec<&gaussian::GaussianMaxDiagnostic> = diag.iter().filter(|d| d.x > 1).collect();
    let mut fits = serde_json::Map::new();
    if fitted.len() >= 3 {
        let pred: Vec<f64> = fitted.iter().map(|d| model::log_loglog_predictor(d.x as f64)).collect();
        let means: Vec<f64> = fitted.iter().map(|d| d.mean_max).collect();
        let root: Vec<f64> = fitted.iter().map(|d| (d.x as f64).ln().sqrt()).collect();
        let resid: Vec<f64> = fitted.iter().map(|d| d.residual).collect();
        let f = stats::ols_fit(&pred, &means)?;
        println!(
            "mean max slope vs ln x − ¾ ln ln x: {:.4} ± {:.4}   (4/√β = {:.4})",
            f.slope,
            f.slope_se,
            model::martingale_slope(beta)
        );
        fits.insert("corrected_slope".into(), serde_json::to_value(f)?);
        fits.insert("residual_vs_sqrt_log".into(), serde_json::to_value(stats::ols_fit(&root, &resid)?)?);
    }

    let mut cov_rows = Vec::new();
    if !pairs.is_empty() {
        let mut grid: Vec<u32> = pairs.iter().flat_map(|&(l, m)| [l, m]).collect();
        grid.sort_unstable();
        grid.dedup();
        let params = model_params(beta, grid.clone())?;
        let t_max = model::t_lambda(params.lambda_max(), beta).unwrap_or(0.0);
        let policy = sinebeta::sde::StepPolicy::until(beta, params.lambda_max(), t_max);
        let samples = engine::with_workers(workers(s), || {
            (0..replicas)
                .map(|r| gaussian::simulate_field(&params, &policy, &sinebeta::sde::derive_stream(seed, r as u64)))
                .collect::<Result<Vec<_>, _>>()
        })??;
        for &(l, m) in &pairs {
            let (i, j) = (grid.binary_search(&l).unwrap(), grid.binary_search(&m).unwrap());
            let xs: Vec<f64> = samples.iter().map(|s| s.values[i]).collect();
            let ys: Vec<f64> = samples.iter().map(|s| s.values[j]).collect();
            let (cov, se) = stats::covariance_se(&xs, &ys);
            let t = model::t_lambda(l.min(m) as f64, beta).unwrap_or(0.0);
            let exact = gaussian::g_covariance(l as f64, m as f64, t, beta)?;
            cov_rows.push(vec![l.to_string(), m.to_string(), t.to_string(), cov.to_string(), se.to_string(), exact.to_string()]);
        }
        let csv = engine::csv_bytes(&["lambda", "mu", "t", "sample_cov", "se", "quadrature"], cov_rows.iter().cloned());
        engine::write_atomic(&out, "gaussian_cov.csv", &csv)?;
    }
    write_summary(
        &out,
        "gaussian",
        &resolved,
        json!({
            "diagnostics": diag,
            "fits": fits,
            "deterministic_phase": "lambda*H(s), H(s) = 1 - exp(-beta*s/4)",
        }),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn tilt_cmd(s: &Settings) -> Result<()> {
    let beta = s.beta(2.0)?;
    let replicas = s.replicas(4000)?;
    let seed = s.seed.unwrap_or(0);
    let lambda = s.lambdas.as_ref().and_then(|l| l.first().copied()).unwrap_or(21);
    let eta = s.eta.unwrap_or(beta.sqrt());
    if !eta.is_finite() {
        return Err(bad("eta", "must be finite"));
    }
    let r = s.positive("R", s.r, 1.75)?;
    let t = match s.t {
        Some(t) if t.is_finite() && t >= 0.0 => t,
        Some(t) => return Err(bad("t", format!("must be nonnegative, got {t}"))),
        None => model::t_prime(lambda as f64, beta, r).map_err(|e| bad("lambdas", e))?,
    };
    let resolved = Settings {
        beta: Some(beta),
        replicas: Some(replicas),
        seed: Some(seed),
        lambdas: Some(vec![lambda]),
        eta: Some(eta),
        r: Some(r),
        t: Some(t),
        ..s.clone()
    };
    let out = create_out(s, "tilt")?;
    let spec = tilt::TiltSpec::new(lambda as f64, eta, beta, t).with_out_stride(0);
    let threshold = 0.5 * t;
    let (weight, tilted, direct) = engine::with_workers(workers(s), || -> Result<_> {
        let weight = tilt::mean_weight_untilted(&spec, eta, replicas, seed)?;
        let run = tilt::tilt_run(&spec, replicas, seed, replicas as u64)?;
        let tilted = tilt::importance_estimate(|p| p.terminal_martingale() > threshold, &run);
        let plain = tilt::TiltSpec { eta: 0.0, ..spec.clone() };
        let hits = tilt::map_paths(&plain, replicas, seed, 2 * replicas as u64, |p| Ok(p.terminal_martingale() > threshold))?;
        let direct = tilt::Estimate::frequency(hits.iter().filter(|h| **h).count(), replicas);
        Ok((weight, tilted, direct))
    })??;
    let mut table = vec![
        ("mean_weight_untilted", weight),
        ("tail_prob_tilted", tilted),
        ("tail_prob_direct", direct),
    ];
    let mut extra = serde_json::Map::new();
    if let Some(x) = s.x {
        let tube = stats::TubeParams::new(r, x, beta).map_err(|e| bad("R", e))?;
        let (q, sx) = engine::with_workers(workers(s), || -> Result<_> {
            let q = tilt::tube_probability_under_q(x, &tube, replicas, seed)?;
            let sx = tilt::s_x_moments(x, r, beta, replicas, seed, tilt::SxHooks::default())?;
            Ok((q, sx))
        })??;
        table.push(("tube_prob_q", q));
        println!(
            "S_x/x: E (tilted) {:.4} ± {:.4}, E (untilted) {:.4} ± {:.4}, E² {:.4} ± {:.4}, Pr(S_x>0) {:.4}, PZ bound {}",
            sx.mean_q,
            sx.mean_q_se,
            sx.mean_p,
            sx.mean_p_se,
            sx.second_p,
            sx.second_p_se,
            sx.positive_frac,
            sx.pz_bound.map(|b| format!("{b:.4}")).unwrap_or_else(|| "n/a".into())
        );
        extra.insert("s_x".into(), serde_json::to_value(&sx)?);
        extra.insert("tube_horizon".into(), json!(tube.horizon()));
    }
    print_row(&["quantity", "estimate", "SE", "ESS"].map(String::from));
    for (name, e) in &table {
        print_row(&[name.to_string(), format!("{:.5}", e.estimate), format!("{:.5}", e.se), format!("{:.1}", e.ess)]);
    }
    println!("tilted and direct 95% intervals overlap: {}", tilted.overlaps(&direct));
    let csv = engine::csv_bytes(
        &["quantity", "estimate", "se", "ess", "n"],
        table
            .iter()
            .map(|(n, e)| vec![n.to_string(), e.estimate.to_string(), e.se.to_string(), e.ess.to_string(), e.n.to_string()]),
    );
    engine::write_atomic(&out, "tilt.csv", &csv)?;
    let estimates: serde_json::Map<String, Value> = table
        .iter()
        .map(|(n, e)| (n.to_string(), serde_json::to_value(e).unwrap()))
        .collect();
    write_summary(
        &out,
        "tilt",
        &resolved,
        json!({
            "estimates": estimates,
            "threshold": threshold,
            "extra": extra,
            "density_exponent": tilt::density_exponent(eta),
            "estimators": {
                "mean_weight_untilted": "mean of exp(eta*M_T - eta^2/2*[M]_T) over untilted paths",
                "tail_prob_tilted": "mean of 1[M_T > T/2] * dP/dQ over paths of the accelerated equation, dQ/dP = E((eta/2) M)",
                "tail_prob_direct": "frequency of M_T > T/2 over untilted paths",
            },
        }),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn tails(s: &Settings) -> Result<()> {
    let beta = s.beta(2.0)?;
    let mut lambdas = s.lambdas.clone().unwrap_or_else(|| vec![16, 64, 256]);
    lambdas.sort_unstable();
    lambdas.dedup();
    let c_list = s.c_list.clone().unwrap_or_else(|| vec![1.0, 2.0, 3.0, 4.0]);
    let (mut cfg, mut resolved) = base_config(s, model_params(beta, lambdas.clone())?, s.replicas(2000)?, s.seed.unwrap_or(0))?;
    resolved.lambdas = Some(lambdas.clone());
    resolved.c_list = Some(c_list.clone());
    cfg.track = lambdas.clone();
    let res = engine::run(&cfg, workers(s))?;
    let out = s.out("tails");
    finish_run(&res, &out, &resolved)?;
    let rows = engine::tail_curves(&res, &c_list);
    print_row(&["lambda", "C", "exceed_frac"].map(String::from));
    for r in &rows {
        print_row(&[r.lambda.to_string(), r.c.to_string(), format!("{:.5}", r.exceed_frac)]);
    }
    for &l in &lambdas {
        let (cs, fs): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.lambda == l).map(|r| (r.c, r.exceed_frac)).unzip();
        match stats::log_linear_tail(&cs, &fs) {
            Ok(f) => println!("λ = {l}: log-frequency slope {:.4}, R² {:.4}", f.slope, f.r_squared),
            Err(_) => println!("λ = {l}: a threshold has no exceedances; no log-linear fit"),
        }
    }
    let csv = engine::csv_bytes(
        &["lambda", "C", "exceed_frac"],
        rows.iter().map(|r| vec![r.lambda.to_string(), r.c.to_string(), r.exceed_frac.to_string()]),
    );
    engine::write_atomic(&out, "tails.csv", &csv)?;
    Ok(())
}

fn osc(s: &Settings) -> Result<()> {
    let beta = s.beta(2.0)?;
    let replicas = s.replicas(500)?;
    let seed = s.seed.unwrap_or(0);
    let lambdas = s.lambdas.clone().unwrap_or_else(|| vec![64, 128, 256]);
    if lambdas.is_empty() || lambdas.contains(&0) {
        return Err(bad("lambdas", "must be a nonempty list of positive integers"));
    }
    let t = s.positive("t", s.t, 4.0)?;
    let a = s.a.unwrap_or(1.0);
    if !a.is_finite() {
        return Err(bad("a", "must be finite"));
    }
    let resolved = Settings {
        beta: Some(beta),
        replicas: Some(replicas),
        seed: Some(seed),
        lambdas: Some(lambdas.clone()),
        t: Some(t),
        a: Some(a),
        ..s.clone()
    };
    let out = create_out(s, "osc")?;
    let rows = engine::with_workers(workers(s), || engine::oscillation_sweep(&lambdas, a, t, beta, replicas, seed))??;
    print_row(&["lambda", "mean sup", "SE", "λ · mean sup"].map(String::from));
    for r in &rows {
        print_row(&[r.lambda.to_string(), format!("{:.5}", r.mean_sup), format!("{:.5}", r.se), format!("{:.4}", r.scaled)]);
    }
    let csv = engine::csv_bytes(
        &["lambda", "a", "T", "mean_sup", "se", "count"],
        rows.iter().map(|r| {
            vec![
                r.lambda.to_string(),
                r.a.to_string(),
                r.t.to_string(),
                r.mean_sup.to_string(),
                r.se.to_string(),
                r.count.to_string(),
            ]
        }),
    );
    engine::write_atomic(&out, "osc.csv", &csv)?;
    write_summary(&out, "osc", &resolved, json!({ "rows": rows }))?;
    println!("wrote {}", out.display());
    Ok(())
}
