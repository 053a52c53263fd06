use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use hmm_order::benchmark::{run_benchmark, write_long_csv, write_table_csv, BenchMethod, BenchmarkConfig, BenchmarkReport};
use hmm_order::em::{DpmleFit, FitOptions, Grouping, MleFit};
use hmm_order::io::{read_observations, write_observations};
use hmm_order::movement::{preprocess as run_preprocess, read_step_angle_csv, read_tracks, to_observation_set, write_step_angle_csv, PreprocessSummary, SplitRules};
use hmm_order::selection::{dpmle_order_select, ic_order_select, CriterionReport, EmissionSpec, NicLikelihood, SearchBounds, SearchOptions};
use hmm_order::sim::{empirical_checks, simulate as run_simulate, ScenarioConfig, SimReport, Truth};
use hmm_order::{forward_backward, viterbi, Channel, ChannelKind, Family, ObservationSet, ParameterVector, PenaltyConfig};
use serde::{Deserialize, Serialize};

use crate::config::pick;
use crate::error::CliError;
use crate::output::{manifest_line, write_atomic, write_json, BENCHMARK_SCHEMA, FIT_SCHEMA, PREPROCESS_SCHEMA, TRUTH_SCHEMA};
use crate::{BenchmarkArgs, Context, FitArgs, PreprocessArgs, ReportArgs, SimulateArgs};

fn require_seed(flag: Option<u64>, file: Option<u64>, command: &str) -> Result<u64, CliError> {
    flag.or(file)
        .ok_or_else(|| CliError::Config(format!("{command} needs a seed (--seed or [{command}] seed)")))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
}

#[derive(Serialize)]
struct TruthDocument<'a> {
    schema: &'static str,
    #[serde(flatten)]
    truth: &'a Truth,
    checks: SimReport,
}

pub fn simulate(ctx: &Context, args: SimulateArgs) -> Result<(), CliError> {
    let f = &ctx.file.simulate;
    let seed = require_seed(args.seed, f.seed, "simulate")?;
    let defaults = ScenarioConfig::default();
    let config = ScenarioConfig {
        scenario: pick(args.scenario, f.scenario, defaults.scenario),
        t: pick(args.t, f.t, defaults.t),
        m: args.m.or(f.m),
        seed,
        ..defaults
    };
    let sim = run_simulate(&config)?;
    let stem = args
        .name
        .or_else(|| f.name.clone())
        .unwrap_or_else(|| format!("scenario{}_T{}_seed{}", config.scenario, config.t, seed));
    let data_path = ctx.out_dir.join(format!("{stem}.csv"));
    let truth_path = ctx.out_dir.join(format!("{stem}.truth.json"));
    write_atomic(&data_path, |w| Ok(write_observations(w, &sim.data)?))?;
    let doc = TruthDocument {
        schema: TRUTH_SCHEMA,
        truth: &sim.truth,
        checks: empirical_checks(&sim.data, &sim.truth),
    };
    write_json(&truth_path, &doc)?;
    let rows = sim.data.total_len();
    println!(
        "{}",
        manifest_line(&data_path, &format!("observations, {} series, {rows} rows", sim.data.series.len()))
    );
    println!("{}", manifest_line(&truth_path, "truth"));
    Ok(())
}

#[derive(Serialize)]
struct PreprocessDocument<'a> {
    schema: &'static str,
    input: String,
    rules: SplitRules,
    covariates: &'a [String],
    #[serde(flatten)]
    summary: &'a PreprocessSummary,
}

pub fn preprocess(ctx: &Context, args: PreprocessArgs) -> Result<(), CliError> {
    let f = &ctx.file.preprocess;
    let input = args
        .input
        .or_else(|| f.input.clone())
        .ok_or_else(|| CliError::Config("preprocess needs --input".into()))?;
    let d = SplitRules::default();
    let rules = SplitRules {
        gap_hours: pick(args.gap_hours, f.gap_hours, d.gap_hours),
        min_fixes: pick(args.min_fixes, f.min_fixes, d.min_fixes),
        max_missing_frac: pick(args.max_missing_frac, f.max_missing_frac, d.max_missing_frac),
    };
    rules.validate()?;
    let stem = file_stem(&input);
    let output = args
        .output
        .or_else(|| f.output.clone())
        .unwrap_or_else(|| ctx.out_dir.join(format!("{stem}_steps.csv")));
    let summary_path = args
        .summary
        .or_else(|| f.summary.clone())
        .unwrap_or_else(|| ctx.out_dir.join(format!("{stem}_summary.json")));
    let (cov_names, tracks) = read_tracks(open(&input)?).map_err(|e| CliError::input(&input, e))?;
    let (series, summary) = run_preprocess(&tracks, &rules)?;
    write_atomic(&output, |w| Ok(write_step_angle_csv(w, &series, &cov_names)?))?;
    write_json(
        &summary_path,
        &PreprocessDocument {
            schema: PREPROCESS_SCHEMA,
            input: input.display().to_string(),
            rules,
            covariates: &cov_names,
            summary: &summary,
        },
    )?;
    print!("{}", preprocess_text(&summary));
    println!("{}", manifest_line(&output, "step/angle series"));
    println!("{}", manifest_line(&summary_path, "summary"));
    Ok(())
}

fn preprocess_text(s: &PreprocessSummary) -> String {
    let mut out = format!(
        "{} tracks, {} fixes read, {} hour collisions, {} fixes kept\n{} segments kept, {} pieces dropped\n",
        s.tracks,
        s.fixes_in,
        s.collisions,
        s.fixes_kept,
        s.segments.len(),
        s.dropped.len()
    );
    for g in &s.segments {
        out.push_str(&format!(
            "  kept    {:<20} {} {:>6} h {:>6} fixes {:>5.1}% missing\n",
            g.id,
            g.start.to_rfc3339(),
            g.hours,
            g.fixes,
            100.0 * g.missing_fraction
        ));
    }
    for p in &s.dropped {
        out.push_str(&format!(
            "  dropped {:<20} {} {:>6} h {:>6} fixes ({:?})\n",
            p.track,
            p.start.to_rfc3339(),
            p.hours,
            p.fixes,
            p.reason
        ));
    }
    if s.segments.is_empty() {
        out.push_str("no segment passed the splitting rules; the output has a header only\n");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DataFormat {
    Observations,
    StepAngle,
}

#[derive(Serialize)]
struct DataInfo {
    path: String,
    format: DataFormat,
    series: usize,
    observations: usize,
    channels: Vec<Channel>,
    covariates: Vec<String>,
}

#[derive(Serialize)]
struct SelectedModel {
    order: usize,
    params: ParameterVector,
    loglik: f64,
    iterations: usize,
    converged: bool,
    /// Objective after each EM iteration.
    trace: Vec<f64>,
}

#[derive(Serialize)]
struct OrderFit {
    order: usize,
    loglik: f64,
    iterations: usize,
    converged: bool,
}

#[derive(Serialize)]
struct PenalizedInfo {
    n_upper: usize,
    draws: usize,
    restarts: usize,
    likelihood: NicLikelihood,
    penalty: PenaltyConfig,
    upper_params: ParameterVector,
    upper_loglik: f64,
    grouping: Grouping,
    failed_draws: usize,
}

#[derive(Serialize)]
struct Decoded {
    series_id: String,
    /// Most probable state path, states numbered from 1.
    viterbi: Vec<usize>,
    /// Posterior state probabilities, one row per time point.
    posterior: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct FitDocument {
    schema: &'static str,
    method: &'static str,
    seed: u64,
    nonstationary: bool,
    families: Vec<Family>,
    data: DataInfo,
    n_hat: usize,
    selected: SelectedModel,
    criteria: Vec<CriterionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    orders: Option<Vec<OrderFit>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    penalized: Option<PenalizedInfo>,
    decoding: Vec<Decoded>,
}

fn load_data(path: &Path) -> Result<(ObservationSet, DataFormat), CliError> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text).map_err(|e| CliError::io(path, e))?;
    let first = text.lines().next().unwrap_or("").trim_start_matches('\u{feff}');
    if first.starts_with("segment_id") {
        let (cov, series) = read_step_angle_csv(text.as_bytes()).map_err(|e| CliError::input(path, e))?;
        let obs = to_observation_set(&series, &cov).map_err(|e| CliError::input(path, e))?;
        Ok((obs, DataFormat::StepAngle))
    } else {
        let obs = read_observations(text.as_bytes()).map_err(|e| CliError::input(path, e))?;
        Ok((obs, DataFormat::Observations))
    }
}

fn default_family(kind: ChannelKind) -> Family {
    match kind {
        ChannelKind::Step => Family::Gamma,
        ChannelKind::Angle => Family::VonMises,
        ChannelKind::Real => Family::Normal,
    }
}

fn parse_likelihood(s: &str) -> Result<NicLikelihood, CliError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "unmerged" => Ok(NicLikelihood::Unmerged),
        "merged" => Ok(NicLikelihood::Merged),
        other => Err(CliError::Config(format!("likelihood must be unmerged or merged, got '{other}'"))),
    }
}

fn range(v: Option<Vec<f64>>, file: Option<[f64; 2]>, default: (f64, f64)) -> (f64, f64) {
    match (v, file) {
        (Some(v), _) if v.len() == 2 => (v[0], v[1]),
        (_, Some([lo, hi])) => (lo, hi),
        _ => default,
    }
}

fn decode(obs: &ObservationSet, params: &ParameterVector) -> Result<Vec<Decoded>, CliError> {
    let paths = viterbi(obs, params)?;
    let fb = forward_backward(obs, params)?;
    let n = params.num_states();
    Ok(obs
        .series
        .iter()
        .zip(paths)
        .enumerate()
        .map(|(m, (s, path))| Decoded {
            series_id: s.id.clone(),
            viterbi: path.into_iter().map(|k| k + 1).collect(),
            posterior: (0..s.len()).map(|t| (0..n).map(|j| fb.posterior(m, t, j)).collect()).collect(),
        })
        .collect())
}

pub fn fit(ctx: &Context, args: FitArgs) -> Result<(), CliError> {
    let f = &ctx.file.fit;
    let data = args
        .data
        .clone()
        .or_else(|| f.data.clone())
        .ok_or_else(|| CliError::Config("fit needs --data".into()))?;
    let method = pick(args.method.clone(), f.method.clone(), "dpmle".into()).to_ascii_lowercase();
    if method != "mle" && method != "dpmle" {
        return Err(CliError::Config(format!("method must be mle or dpmle, got '{method}'")));
    }
    let seed = require_seed(args.seed, f.seed, "fit")?;
    let nonstationary = args.nonstationary || f.nonstationary.unwrap_or(false);
    let strict = args.strict || f.strict.unwrap_or(false);
    let output = args
        .output
        .clone()
        .or_else(|| f.output.clone())
        .unwrap_or_else(|| ctx.out_dir.join(format!("{}_fit.json", file_stem(&data))));

    let (obs, format) = load_data(&data)?;
    let obs = match args.covariates.clone().or_else(|| f.covariates.clone()) {
        Some(names) => obs.select_covariates(&names)?,
        None => obs,
    };
    let obs = if nonstationary {
        if !obs.has_covariates() {
            return Err(CliError::Config("a nonstationary fit needs at least one covariate column".into()));
        }
        obs
    } else {
        obs.without_covariates()
    };
    let families = match args.families.clone().or_else(|| f.families.clone()) {
        Some(names) => names.iter().map(|s| Family::parse(s)).collect::<Result<Vec<_>, _>>()?,
        None => obs.channels.iter().map(|c| default_family(c.kind)).collect(),
    };
    if families.len() != obs.num_channels() {
        return Err(CliError::Config(format!(
            "{} families given for {} channels",
            families.len(),
            obs.num_channels()
        )));
    }
    let spec = EmissionSpec::new(families.clone());
    let d = FitOptions::default();
    let fit_opts = FitOptions {
        max_iter: pick(args.max_iter, f.max_iter, d.max_iter),
        tol: pick(args.tol, f.tol, d.tol),
        nonstationary,
        ..d
    };
    let info = DataInfo {
        path: data.display().to_string(),
        format,
        series: obs.series.len(),
        observations: obs.total_len(),
        channels: obs.channels.clone(),
        covariates: obs.covariate_names.clone(),
    };

    let doc = if method == "mle" {
        let orders = pick(args.orders.clone(), f.orders.clone(), vec![2, 3, 4]);
        if orders.is_empty() || orders.contains(&0) {
            return Err(CliError::Config("orders must be positive".into()));
        }
        let restarts = pick(args.restarts, f.restarts, 10);
        let ic = ic_order_select(&obs, &orders, &spec, restarts, seed, &fit_opts)?;
        let n_hat = ic.bic.best().order;
        let best: &MleFit = ic.fit_for(n_hat).expect("selected order was fitted");
        FitDocument {
            schema: FIT_SCHEMA,
            method: "mle",
            seed,
            nonstationary,
            families,
            data: info,
            n_hat,
            selected: SelectedModel {
                order: n_hat,
                params: best.params.clone(),
                loglik: best.loglik,
                iterations: best.iterations,
                converged: best.converged,
                trace: best.trace.clone(),
            },
            decoding: decode(&obs, &best.params)?,
            orders: Some(
                ic.fits
                    .iter()
                    .map(|m| OrderFit {
                        order: m.params.num_states(),
                        loglik: m.loglik,
                        iterations: m.iterations,
                        converged: m.converged,
                    })
                    .collect(),
            ),
            criteria: vec![ic.aic, ic.bic],
            penalized: None,
        }
    } else {
        let n_upper = pick(args.n_upper, f.n_upper, 4);
        if n_upper < 2 {
            return Err(CliError::Config("upper order must be at least 2".into()));
        }
        let restarts = pick(args.restarts, f.restarts, 9);
        let sd = SearchOptions::default();
        let likelihood = match args.likelihood.as_deref().or(f.likelihood.as_deref()) {
            Some(s) => parse_likelihood(s)?,
            None => sd.likelihood,
        };
        let search = SearchOptions {
            draws: pick(args.draws, f.draws, sd.draws),
            bounds: SearchBounds {
                log_m_lambda: range(args.log_m_lambda.clone(), f.log_m_lambda, sd.bounds.log_m_lambda),
                c_n: range(args.c_n.clone(), f.c_n, sd.bounds.c_n),
            },
            seed,
            likelihood,
            a: pick(args.a, f.a, sd.a),
            merge_tol: pick(args.merge_tol, f.merge_tol, sd.merge_tol),
        };
        search.bounds.validate()?;
        if search.draws == 0 {
            return Err(CliError::Config("draw count must be at least 1".into()));
        }
        let result = dpmle_order_select(&obs, &spec, n_upper, restarts, &search, &fit_opts)?;
        let best: &DpmleFit = &result.best;
        FitDocument {
            schema: FIT_SCHEMA,
            method: "dpmle",
            seed,
            nonstationary,
            families,
            data: info,
            n_hat: best.n_hat,
            selected: SelectedModel {
                order: best.n_hat,
                params: best.merged.clone(),
                loglik: best.merged_loglik,
                iterations: best.iterations,
                converged: best.converged,
                trace: best.trace.clone(),
            },
            decoding: decode(&obs, &best.merged)?,
            criteria: vec![result.report.clone()],
            orders: None,
            penalized: Some(PenalizedInfo {
                n_upper,
                draws: search.draws,
                restarts,
                likelihood,
                penalty: best.penalty,
                upper_params: best.params.clone(),
                upper_loglik: best.loglik,
                grouping: best.grouping.clone(),
                failed_draws: result.failures.len(),
            }),
        }
    };
    write_json(&output, &doc)?;
    println!(
        "{} N̂ = {} (log-likelihood {:.4}, {} iterations, {})",
        doc.method,
        doc.n_hat,
        doc.selected.loglik,
        doc.selected.iterations,
        if doc.selected.converged { "converged" } else { "not converged" }
    );
    println!("{}", manifest_line(&output, "fit"));
    if strict && !doc.selected.converged {
        return Err(CliError::NotConverged(format!(
            "stopped after {} iterations",
            doc.selected.iterations
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchmarkDocument {
    schema: String,
    #[serde(flatten)]
    report: BenchmarkReport,
}

pub fn benchmark(ctx: &Context, args: BenchmarkArgs) -> Result<(), CliError> {
    let f = &ctx.file.benchmark;
    let seed = require_seed(args.seed, f.seed, "benchmark")?;
    let d = BenchmarkConfig::default();
    let methods = match args.methods.clone().or_else(|| f.methods.clone()) {
        Some(names) => names.iter().map(|s| BenchMethod::parse(s)).collect::<Result<Vec<_>, _>>()?,
        None => d.methods.clone(),
    };
    let likelihood = match args.likelihood.as_deref().or(f.likelihood.as_deref()) {
        Some(s) => parse_likelihood(s)?,
        None => d.search.likelihood,
    };
    let config = BenchmarkConfig {
        scenarios: pick(args.scenarios.clone(), f.scenarios.clone(), d.scenarios.clone()),
        lengths: pick(args.lengths.clone(), f.lengths.clone(), d.lengths.clone()),
        replicates: pick(args.replicates, f.replicates, d.replicates),
        seed,
        methods,
        orders: pick(args.orders.clone(), f.orders.clone(), d.orders.clone()),
        n_upper: pick(args.n_upper, f.n_upper, d.n_upper),
        ic_restarts: pick(args.ic_restarts, f.ic_restarts, d.ic_restarts),
        dpmle_restarts: pick(args.dpmle_restarts, f.dpmle_restarts, d.dpmle_restarts),
        search: SearchOptions {
            draws: pick(args.draws, f.draws, d.search.draws),
            likelihood,
            ..d.search
        },
        fit: FitOptions {
            max_iter: pick(args.max_iter, f.max_iter, d.fit.max_iter),
            tol: pick(args.tol, f.tol, d.fit.tol),
            ..d.fit
        },
    };
    config.validate()?;
    let stem = args.name.clone().or_else(|| f.name.clone()).unwrap_or_else(|| "benchmark".into());
    let json_path = ctx.out_dir.join(format!("{stem}.json"));
    let table_path = ctx.out_dir.join(format!("{stem}_table.csv"));
    let long_path = ctx.out_dir.join(format!("{stem}_long.csv"));
    let cells = config.scenarios.len() * config.lengths.len();
    println!(
        "grid: {} settings x {} replicates, methods {}",
        cells,
        config.replicates,
        config.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
    );
    if args.dry_run {
        return Ok(());
    }
    let report = run_benchmark(&config)?;
    write_atomic(&table_path, |w| Ok(write_table_csv(w, &report)?))?;
    write_atomic(&long_path, |w| Ok(write_long_csv(w, &report)?))?;
    let doc = BenchmarkDocument {
        schema: BENCHMARK_SCHEMA.into(),
        report,
    };
    write_json(&json_path, &doc)?;
    print!("{}", benchmark_table(&doc.report));
    if doc.report.failures > 0 {
        eprintln!("warning: {} method runs failed; see the outcomes in {}", doc.report.failures, json_path.display());
    }
    for (p, what) in [(&json_path, "report"), (&table_path, "table"), (&long_path, "long format")] {
        println!("{}", manifest_line(p, what));
    }
    Ok(())
}

fn benchmark_table(r: &BenchmarkReport) -> String {
    let mut orders: Vec<usize> = r.cells.iter().flat_map(|c| c.counts.keys().copied()).collect();
    orders.sort_unstable();
    orders.dedup();
    let mut out = format!("{:<10} {:>8} {:>7} {:>5}", "method", "scenario", "T", "reps");
    for k in &orders {
        out.push_str(&format!(" {:>5}", format!("N={k}")));
    }
    out.push_str(&format!(" {:>6} {:>8}\n", "failed", "success"));
    for c in &r.cells {
        out.push_str(&format!("{:<10} {:>8} {:>7} {:>5}", c.method.name(), c.scenario, c.t, c.replicates));
        for k in &orders {
            out.push_str(&format!(" {:>5}", c.counts.get(k).copied().unwrap_or(0)));
        }
        out.push_str(&format!(" {:>6} {:>7.1}%\n", c.failures, 100.0 * c.success_rate));
    }
    for (m, t) in &r.timing {
        out.push_str(&format!(
            "{m}: {:.2} s per fit (min {:.2}, max {:.2})\n",
            t.mean_seconds, t.min_seconds, t.max_seconds
        ));
    }
    out
}

#[derive(Deserialize)]
struct FitSummary {
    method: String,
    n_hat: usize,
    data: FitSummaryData,
    criteria: Vec<CriterionReport>,
}

#[derive(Deserialize)]
struct FitSummaryData {
    path: String,
    observations: usize,
}

fn fit_table(s: &FitSummary) -> String {
    let mut out = format!(
        "{} fit of {} ({} observations): N̂ = {}\n",
        s.method, s.data.path, s.data.observations, s.n_hat
    );
    for c in &s.criteria {
        let name = serde_json::to_value(c.method).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        out.push_str(&format!("{name}\n"));
        out.push_str(&format!(
            "  {:>5} {:>5} {:>9} {:>9} {:>4} {:>16} {:>16}\n",
            "order", "start", "λ", "C_N", "k", "loglik", "value"
        ));
        for (i, k) in c.candidates.iter().enumerate() {
            let opt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "  {:>5} {:>5} {:>9} {:>9} {:>4} {:>16.4} {:>16.4}{}\n",
                k.order,
                k.start.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
                opt(k.lambda),
                opt(k.c_n),
                k.k,
                k.loglik,
                k.value,
                if i == c.selected { "  *" } else { "" }
            ));
        }
    }
    out
}

pub fn report(_ctx: &Context, args: ReportArgs) -> Result<(), CliError> {
    let path = &args.input;
    let value: serde_json::Value = serde_json::from_reader(open(path)?).map_err(|e| CliError::input(path, e.into()))?;
    let schema = value.get("schema").and_then(|s| s.as_str()).unwrap_or("").to_string();
    let bad = |e: serde_json::Error| CliError::input(path, e.into());
    match schema.as_str() {
        BENCHMARK_SCHEMA => {
            let mut value = value;
            if let Some(obj) = value.as_object_mut() {
                obj.remove("schema");
            }
            let report: BenchmarkReport = serde_json::from_value(value).map_err(bad)?;
            print!("{}", benchmark_table(&report));
            if let Some(long) = &args.long {
                write_atomic(long, |w| Ok(write_long_csv(w, &report)?))?;
                println!("{}", manifest_line(long, "long format"));
            }
            Ok(())
        }
        FIT_SCHEMA => {
            if args.long.is_some() {
                return Err(CliError::Config("--long applies to benchmark reports only".into()));
            }
            let s: FitSummary = serde_json::from_value(value).map_err(bad)?;
            print!("{}", fit_table(&s));
            Ok(())
        }
        other => Err(CliError::input(
            path,
            hmm_order::Error::InvalidData(format!(
                "unrecognized schema '{other}'; expected {BENCHMARK_SCHEMA} or {FIT_SCHEMA}"
            )),
        )),
    }
}
