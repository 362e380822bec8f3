use super::*;
use proptest::prelude::*;

fn tiny(replicas: usize) -> RunConfig {
    let model = ModelParams::full_grid(2.0, 8).unwrap();
    let mut c = RunConfig::new(model, replicas, 7);
    c.pairs = vec![(3, 5)];
    c.track = vec![4];
    c.tilt = Some(TiltSettings {
        eta: 1.0,
        t: 1.0,
        lambdas: vec![2],
    });
    c.x_list = vec![2, 4, 8];
    c
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn same_seed_same_bytes() {
    let a = run(&tiny(1), 1).unwrap();
    let b = run(&tiny(1), 1).unwrap();
    assert_eq!(a, b);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    persist(&a, da.path()).unwrap();
    persist(&b, db.path()).unwrap();
    assert_eq!(dir_bytes(da.path()), dir_bytes(db.path()));
}

#[test]
fn worker_count_does_not_change_results() {
    let c = tiny(100);
    let one = run(&c, 1).unwrap();
    let eight = run(&c, 8).unwrap();
    assert_eq!(one, eight);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    persist(&one, da.path()).unwrap();
    persist(&eight, db.path()).unwrap();
    assert_eq!(dir_bytes(da.path()), dir_bytes(db.path()));
}

#[test]
fn round_trip_and_metadata() {
    let res = run(&tiny(5), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    persist(&res, dir.path()).unwrap();
    assert_eq!(load(dir.path()).unwrap(), res);
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join(SUMMARY_JSON)).unwrap()).unwrap();
    assert_eq!(json["seed"], 7);
    assert_eq!(json["config_hash"].as_str().unwrap(), res.config.hash());
    assert_eq!(json["config_hash"].as_str().unwrap().len(), 64);
    assert!(json["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
    for key in ["config", "aggregates", "fits"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    let cfg: RunConfig = serde_json::from_value(json["config"].clone()).unwrap();
    assert_eq!(cfg, res.config);
    let header = String::from_utf8(fs::read(dir.path().join(REPLICAS_CSV)).unwrap()).unwrap();
    assert!(header.starts_with("replica,max_dev,argmax_lambda,one_sided_max,nonconverged,failed\n"));
    let b = String::from_utf8(fs::read(dir.path().join(BRACKETS_CSV)).unwrap()).unwrap();
    assert!(b.starts_with("replica,lambda,mu,t,bracket,cross_bracket\n"));
    assert_eq!(b.lines().count(), 6);
}

#[test]
fn empty_results_write_headers_only() {
    let res = ResultSet {
        config: RunConfig::new(ModelParams::full_grid(2.0, 4).unwrap(), 1, 0),
        per_replica: Vec::new(),
        aggregates: BTreeMap::new(),
        fits: BTreeMap::new(),
    };
    let dir = tempfile::tempdir().unwrap();
    persist(&res, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join(REPLICAS_CSV)).unwrap();
    assert_eq!(text, "replica,max_dev,argmax_lambda,one_sided_max,nonconverged,failed\n");
    let counts = fs::read_to_string(dir.path().join(COUNTS_CSV)).unwrap();
    assert_eq!(counts, "replica,lambda,N,deviation\n");
    assert_eq!(load(dir.path()).unwrap(), res);
}

#[test]
fn persist_reports_path_on_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let res = run(&tiny(1), 1).unwrap();
    let err = persist(&res, &blocker.join("sub")).unwrap_err();
    assert!(err.to_string().contains("file"), "{err}");
}

#[test]
fn failures_are_recorded_then_abort_past_ten_percent() {
    let c = tiny(20);
    let flaky = |every: usize| {
        move |cfg: &RunConfig, pol: &StepPolicy, r: usize| {
            if r.is_multiple_of(every) {
                Err(format!("injected failure {r}"))
            } else {
                run_replica(cfg, pol, r)
            }
        }
    };
    let ok = run_with(&c, 1, flaky(10)).unwrap();
    let failed: Vec<_> = ok.per_replica.iter().filter(|r| r.failed).map(|r| r.replica).collect();
    assert_eq!(failed, vec![0, 10]);
    assert_eq!(ok.aggregates["nonconverged"].count, 18);
    let dir = tempfile::tempdir().unwrap();
    persist(&ok, dir.path()).unwrap();
    assert_eq!(load(dir.path()).unwrap(), ok);
    assert!(matches!(
        run_with(&c, 1, flaky(5)),
        Err(EngineError::FailureThreshold { failed: 4, total: 20, .. })
    ));
}

#[test]
fn config_errors_name_the_field() {
    let mut c = tiny(1);
    c.pairs = vec![(3, 9)];
    assert!(matches!(run(&c, 1), Err(EngineError::Config { field, .. }) if field == "pairs"));
    let mut c = tiny(1);
    c.replicas = 0;
    assert!(matches!(run(&c, 1), Err(EngineError::Config { field, .. }) if field == "replicas"));
    let mut c = tiny(1);
    c.model.beta = 0.0;
    assert!(matches!(run(&c, 1), Err(EngineError::Config { field, .. }) if field == "beta"));
    let mut c = tiny(1);
    c.policy.t_end = 0.5;
    assert!(matches!(run(&c, 1), Err(EngineError::Config { field, .. }) if field == "policy.t_end"));
    let json = r#"{"model":{"beta":2,"x_max":2,"lambda_grid":[1,2]},"policy":{"h0":0.01,"refine_c":0.1,"t_end":30,"relax_extra":0,"converge_tol":0.3,"out_stride":0,"substeps":1},"replicas":1,"seed":0,"bogus":1}"#;
    assert!(serde_json::from_str::<RunConfig>(json).is_err());
}

#[test]
fn synthetic_fit_recovers_exact_line() {
    let mut c = tiny(1);
    c.x_list = vec![64, 128, 256, 512, 1024];
    let agg: BTreeMap<String, MeanSe> = c
        .x_list
        .iter()
        .map(|&x| {
            (
                max_key(x),
                MeanSe {
                    mean: 0.45 * (x as f64).ln(),
                    se: 0.0,
                    count: 1,
                },
            )
        })
        .collect();
    let fits = scaling_fits(&c, &agg).unwrap();
    let f = fits["theorem1_slope"];
    assert!((f.slope - 0.45).abs() < 1e-12 && f.intercept.abs() < 1e-12);
    assert!(fits.contains_key("theorem1_corrected_slope"));
    assert!(!fits.contains_key("one_sided_slope"));
}

#[test]
fn sweep_requires_four_points() {
    let c = tiny(1);
    assert!(matches!(
        scaling_sweep(&c, &[4, 8, 16], 1),
        Err(EngineError::Config { field, .. }) if field == "x_list"
    ));
    assert!(scaling_sweep(&c, &[4, 8, 8, 16], 1).is_err());
    let out = scaling_sweep(&c, &[2, 4, 8, 16], 1).unwrap();
    assert!(out.fits.contains_key("theorem1_slope"));
    assert_eq!(out.config.model.x_max, 16);
}

#[test]
fn tracked_rows_are_consistent() {
    let res = run(&tiny(3), 1).unwrap();
    for r in &res.per_replica {
        let m = &r.martingales[0];
        assert_eq!(m.lambda, 4);
        assert_eq!(m.t_cut, model::t_lambda(4.0, 2.0).unwrap());
        assert!(m.bracket_cut >= 0.0 && m.bracket_cut <= 4.0 * m.t_cut + 1e-9);
        let b = &r.brackets[0];
        assert!(b.cross_bracket.abs() <= 4.0 * b.t + 1e-9);
        assert_eq!(r.counts.len(), 8);
        assert_eq!(r.maxima.len(), 3);
        assert_eq!(r.max_dev, r.maxima[2].max_dev);
    }
}

proptest! {
    #[test]
    fn chunked_reduction_is_sequential(values in proptest::collection::vec(-1e6f64..1e6, 1..200), cut in 0usize..200) {
        let cut = cut.min(values.len());
        let whole: OrderedValues = values.iter().copied().collect();
        let head: OrderedValues = values[..cut].iter().copied().collect();
        let tail: OrderedValues = values[cut..].iter().copied().collect();
        prop_assert_eq!(head.merge(tail).summary(), whole.summary());
    }
}
