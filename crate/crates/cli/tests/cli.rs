mod support;

use std::fs;

use support::{code, listing, read_json, run, schema_errors, stderr, stdout};

#[test]
fn simulate_writes_data_and_truth_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(d.path(), &["simulate", "--scenario", "1", "--T", "5000", "--seed", "7"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("5000 rows"));
    }
    let csv = fs::read_to_string(a.path().join("scenario1_T5000_seed7.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5001);
    assert!(csv.starts_with("series_id,t,step,cov_tod\n"));
    for f in ["scenario1_T5000_seed7.csv", "scenario1_T5000_seed7.truth.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let truth = read_json(&a.path().join("scenario1_T5000_seed7.truth.json"));
    assert_eq!(schema_errors("truth", &truth), Vec::<String>::new());
}

#[test]
fn simulate_honours_the_number_of_individuals() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["simulate", "--scenario", "3", "--T", "5000", "--M", "10", "--seed", "7", "--name", "s3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(d.path().join("s3.csv")).unwrap();
    let mut ids: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids.len(), 50_000);
    ids.dedup();
    assert_eq!(ids.len(), 10);
    let truth = read_json(&d.path().join("s3.truth.json"));
    assert_eq!(schema_errors("truth", &truth), Vec::<String>::new());
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["simulate", "--scenario", "1", "--T", "100"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("seed"));
    assert_eq!(code(&run(d.path(), &["simulate", "--scenario", "9", "--T", "100", "--seed", "1"])), 2);
    assert_eq!(code(&run(d.path(), &["simulate", "--bogus"])), 2);
    assert_eq!(code(&run(d.path(), &["benchmark", "--seed", "1", "--replicates", "0", "--dry-run"])), 2);
    assert_eq!(code(&run(d.path(), &["benchmark", "--seed", "1", "--methods", "hqc"])), 2);
    assert!(listing(d.path()).is_empty());
}

#[test]
fn unwritable_output_exits_with_code_five() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("blocker"), "x").unwrap();
    let o = run(d.path(), &["--out-dir", "blocker/sub", "simulate", "--T", "10", "--seed", "1"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    let o = run(d.path(), &["fit", "--data", "missing.csv", "--seed", "1"]);
    assert_eq!(code(&o), 5);
}

#[test]
fn config_file_values_yield_to_flags() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("run.toml"),
        "out_dir = \"res\"\n[simulate]\nscenario = 2\nT = 50\nseed = 3\nname = \"cfg\"\n",
    )
    .unwrap();
    let o = run(d.path(), &["--config", "run.toml", "simulate", "--T", "60"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(d.path().join("res/cfg.csv")).unwrap();
    assert_eq!(csv.lines().count(), 61);
    let truth = read_json(&d.path().join("res/cfg.truth.json"));
    assert_eq!(truth["config"]["scenario"], 2);
    assert_eq!(truth["config"]["seed"], 3);

    fs::write(d.path().join("bad.toml"), "[simulate]\nlength = 3\n").unwrap();
    let o = run(d.path(), &["--config", "bad.toml", "simulate", "--seed", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.toml"));
}

#[test]
fn output_directory_defaults_to_the_environment() {
    let d = tempfile::tempdir().unwrap();
    let target = d.path().join("envdir");
    let o = support::bin()
        .current_dir(d.path())
        .env("HMM_ORDER_OUT_DIR", &target)
        .args(["simulate", "--T", "20", "--seed", "2", "--name", "e"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(target.join("e.csv").exists());
    let o = support::bin()
        .current_dir(d.path())
        .env("HMM_ORDER_OUT_DIR", &target)
        .args(["--out-dir", "flag", "simulate", "--T", "20", "--seed", "2", "--name", "e"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(d.path().join("flag/e.csv").exists());
}

#[test]
fn fit_mle_reports_both_criteria_for_every_order() {
    let d = tempfile::tempdir().unwrap();
    run(d.path(), &["simulate", "--T", "800", "--seed", "5", "--name", "s"]);
    let o = run(d.path(), &["fit", "--data", "s.csv", "--method", "mle", "--orders", "2,3,4", "--restarts", "3", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fit = read_json(&d.path().join("s_fit.json"));
    assert_eq!(schema_errors("fit", &fit), Vec::<String>::new());
    let crit = fit["criteria"].as_array().unwrap();
    let names: Vec<&str> = crit.iter().map(|c| c["method"].as_str().unwrap()).collect();
    assert_eq!(names, vec!["aic", "bic"]);
    for c in crit {
        let orders: Vec<u64> = c["candidates"].as_array().unwrap().iter().map(|x| x["order"].as_u64().unwrap()).collect();
        assert_eq!(orders, vec![2, 3, 4]);
    }
    let n_hat = fit["n_hat"].as_u64().unwrap() as usize;
    let path = fit["decoding"][0]["viterbi"].as_array().unwrap();
    assert_eq!(path.len(), 800);
    assert!(path.iter().all(|s| (1..=n_hat as u64).contains(&s.as_u64().unwrap())));
    let post = fit["decoding"][0]["posterior"].as_array().unwrap();
    let row: f64 = post[10].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((row - 1.0).abs() < 1e-9);
    let rep = run(d.path(), &["report", "s_fit.json"]);
    assert_eq!(code(&rep), 0);
    assert!(stdout(&rep).contains("bic"));
}

#[test]
fn fit_dpmle_writes_a_valid_result() {
    let d = tempfile::tempdir().unwrap();
    run(d.path(), &["simulate", "--T", "1500", "--seed", "6", "--name", "s"]);
    let o = run(
        d.path(),
        &["fit", "--data", "s.csv", "--method", "dpmle", "--n-upper", "4", "--draws", "4", "--restarts", "3", "--seed", "2", "--output", "out/fit.json"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fit = read_json(&d.path().join("out/fit.json"));
    assert_eq!(schema_errors("fit", &fit), Vec::<String>::new());
    assert_eq!(fit["n_hat"], 3);
    assert_eq!(fit["penalized"]["n_upper"], 4);
    assert_eq!(fit["criteria"][0]["method"], "dpmle-stationary");
    assert!(fit["selected"]["trace"].as_array().unwrap().len() >= 2);
}

#[test]
fn fit_with_covariates_uses_the_logit_model() {
    let d = tempfile::tempdir().unwrap();
    run(d.path(), &["simulate", "--scenario", "6", "--T", "600", "--seed", "6", "--name", "s"]);
    let o = run(
        d.path(),
        &["fit", "--data", "s.csv", "--method", "mle", "--orders", "2", "--restarts", "2", "--nonstationary", "--covariates", "tod", "--seed", "2"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fit = read_json(&d.path().join("s_fit.json"));
    assert_eq!(schema_errors("fit", &fit), Vec::<String>::new());
    assert_eq!(fit["selected"]["params"]["transition"]["kind"], "covariate_logit");
    let o = run(d.path(), &["fit", "--data", "s.csv", "--nonstationary", "--covariates", "depth", "--seed", "2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn corrupt_data_exits_with_the_parse_code_and_writes_nothing() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.csv"), "series_id,t,step\na,1,0.5\na,2,abc\n").unwrap();
    let o = run(d.path(), &["fit", "--data", "bad.csv", "--seed", "1"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    assert_eq!(listing(d.path()), vec!["bad.csv"]);
    fs::write(d.path().join("neg.csv"), "series_id,t,step\na,1,-0.5\n").unwrap();
    assert_eq!(code(&run(d.path(), &["fit", "--data", "neg.csv", "--seed", "1"])), 3);
    fs::write(d.path().join("junk.json"), "{\"schema\": \"other\"}").unwrap();
    assert_eq!(code(&run(d.path(), &["report", "junk.json"])), 3);
}

#[test]
fn strict_fits_that_stop_early_exit_with_the_convergence_code() {
    let d = tempfile::tempdir().unwrap();
    run(d.path(), &["simulate", "--T", "400", "--seed", "5", "--name", "s"]);
    let o = run(
        d.path(),
        &["fit", "--data", "s.csv", "--method", "mle", "--orders", "3", "--restarts", "1", "--max-iter", "1", "--strict", "--seed", "1"],
    );
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let fit = read_json(&d.path().join("s_fit.json"));
    assert_eq!(fit["selected"]["converged"], false);
}

const RAW: &str = "id,timestamp,lat,lon,shore_km\n";

fn raw_track(id: &str, hours: &[i64]) -> String {
    hours
        .iter()
        .map(|&h| {
            format!(
                "{id},2017-08-{:02}T{:02}:00:00Z,{},{},{}\n",
                10 + h / 24,
                h % 24,
                70.0 + 0.01 * h as f64,
                -80.0 + 0.004 * (h % 5) as f64,
                1.5 + 0.1 * h as f64
            )
        })
        .collect()
}

#[test]
fn preprocess_splits_reports_and_refuses_its_own_output() {
    let d = tempfile::tempdir().unwrap();
    let hours: Vec<i64> = (0..10).chain(23..33).collect();
    fs::write(d.path().join("tracks.csv"), format!("{RAW}{}", raw_track("n1", &hours))).unwrap();
    let o = run(d.path(), &["preprocess", "--input", "tracks.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = read_json(&d.path().join("tracks_summary.json"));
    assert_eq!(schema_errors("preprocess", &summary), Vec::<String>::new());
    assert_eq!(summary["segments"].as_array().unwrap().len(), 2);
    let steps = fs::read_to_string(d.path().join("tracks_steps.csv")).unwrap();
    assert!(steps.starts_with("segment_id,hour,step_km,angle_rad,shore_km\n"));
    assert_eq!(steps.lines().count(), 21);

    let o = run(d.path(), &["preprocess", "--input", "tracks_steps.csv", "--output", "again.csv"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("already a processed"));
    assert!(!d.path().join("again.csv").exists());

    let o = run(d.path(), &["fit", "--data", "tracks_steps.csv", "--method", "mle", "--orders", "1,2", "--restarts", "2", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fit = read_json(&d.path().join("tracks_steps_fit.json"));
    assert_eq!(fit["data"]["format"], "step_angle");
    assert_eq!(fit["families"], serde_json::json!(["gamma", "von_mises"]));
    assert_eq!(schema_errors("fit", &fit), Vec::<String>::new());
}

#[test]
fn preprocess_with_only_short_pieces_writes_an_empty_table() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("short.csv"), format!("{RAW}{}", raw_track("a", &[0, 1, 2, 3, 4]))).unwrap();
    let o = run(d.path(), &["preprocess", "--input", "short.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("no segment passed"));
    let steps = fs::read_to_string(d.path().join("short_steps.csv")).unwrap();
    assert_eq!(steps.lines().count(), 1);
    let summary = read_json(&d.path().join("short_summary.json"));
    assert_eq!(summary["dropped"][0]["reason"], "too_few_fixes");
    assert_eq!(summary["dropped"][0]["fixes"], 5);
}

#[test]
fn preprocess_reports_schema_errors_by_line() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("t.csv"), format!("{RAW}a,2017-08-10T00:00:00Z,70,-80,1\na,2017-08-10T01:00:00Z,70,-80\n")).unwrap();
    let o = run(d.path(), &["preprocess", "--input", "t.csv"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn benchmark_writes_reports_that_validate_and_rerun_identically() {
    let d = tempfile::tempdir().unwrap();
    let args = [
        "benchmark", "--scenarios", "1", "--T", "300", "--replicates", "1", "--seed", "3", "--methods", "bic,dpmle", "--draws", "2",
        "--dpmle-restarts", "2", "--ic-restarts", "2",
    ];
    let o = run(d.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&d.path().join("benchmark.json"));
    assert_eq!(schema_errors("benchmark", &report), Vec::<String>::new());
    for c in report["cells"].as_array().unwrap() {
        let total: u64 = c["counts"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(total + c["failures"].as_u64().unwrap(), 1);
    }
    let long = fs::read_to_string(d.path().join("benchmark_long.csv")).unwrap();
    assert!(long.starts_with("method,scenario,T,order,count\n"));
    let table = fs::read_to_string(d.path().join("benchmark_table.csv")).unwrap();
    let o = run(d.path(), &args);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(d.path().join("benchmark_long.csv")).unwrap(), long);
    assert_eq!(fs::read_to_string(d.path().join("benchmark_table.csv")).unwrap(), table);
    let again = read_json(&d.path().join("benchmark.json"));
    assert_eq!(report["cells"], again["cells"]);
    assert_eq!(report["config"], again["config"]);

    let rep = run(d.path(), &["report", "benchmark.json", "--long", "plot.csv"]);
    assert_eq!(code(&rep), 0, "{}", stderr(&rep));
    assert_eq!(fs::read_to_string(d.path().join("plot.csv")).unwrap(), long);
    assert!(stdout(&rep).contains("success"));
}

#[test]
fn benchmark_accepts_a_full_scale_replicate_count() {
    let d = tempfile::tempdir().unwrap();
    let o = run(
        d.path(),
        &["benchmark", "--scenarios", "1,2,3,4,5,6", "--T", "5000,10000", "--replicates", "100", "--methods", "aic,bic,dpmle,dpmle-cov", "--seed", "1", "--dry-run"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("12 settings x 100 replicates"));
}
