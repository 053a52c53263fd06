//! Replicated simulation grid: every method selects an order on every
//! simulated data set and selected orders are tallied per cell.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::FitOptions;
use crate::emission::Family;
use crate::error::{Error, Result};
use crate::selection::{dpmle_order_select, ic_order_select, EmissionSpec, SearchOptions};
use crate::sim::{simulate, ScenarioConfig};

/// Every scenario is generated with three states.
pub const TRUE_ORDER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMethod {
    Aic,
    Bic,
    /// Stationary penalized fit.
    Dpmle,
    /// Penalized fit with time-of-day covariates in the transitions.
    DpmleCov,
}

impl BenchMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "aic" => Ok(Self::Aic),
            "bic" => Ok(Self::Bic),
            "dpmle" => Ok(Self::Dpmle),
            "dpmle-cov" | "dpmle_cov" => Ok(Self::DpmleCov),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Aic => "aic",
            Self::Bic => "bic",
            Self::Dpmle => "dpmle",
            Self::DpmleCov => "dpmle-cov",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub scenarios: Vec<u8>,
    pub lengths: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub methods: Vec<BenchMethod>,
    /// Orders compared by AIC and BIC.
    pub orders: Vec<usize>,
    /// Upper order of the penalized fits.
    pub n_upper: usize,
    /// Random starts per order for AIC/BIC.
    pub ic_restarts: usize,
    /// Random starts whose MLEs seed the penalized fits.
    pub dpmle_restarts: usize,
    pub search: SearchOptions,
    pub fit: FitOptions,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            scenarios: vec![1],
            lengths: vec![5000],
            replicates: 20,
            seed: 1,
            methods: vec![BenchMethod::Aic, BenchMethod::Bic, BenchMethod::Dpmle],
            orders: vec![2, 3, 4],
            n_upper: 4,
            ic_restarts: 10,
            dpmle_restarts: 9,
            search: SearchOptions {
                draws: 20,
                ..SearchOptions::default()
            },
            fit: FitOptions::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicate count must be at least 1".into()));
        }
        if self.scenarios.is_empty() || self.lengths.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("scenarios, lengths and methods must be non-empty".into()));
        }
        if self.orders.is_empty() || self.orders.contains(&0) {
            return Err(Error::Config("orders must be non-empty and positive".into()));
        }
        if self.n_upper < 2 {
            return Err(Error::Config("upper order must be at least 2".into()));
        }
        for &s in &self.scenarios {
            for &t in &self.lengths {
                ScenarioConfig::new(s, t, 0).validate()?;
            }
        }
        self.search.bounds.validate()
    }
}

/// Data seed of one replicate; independent of scheduling.
pub fn replicate_seed(seed: u64, scenario: u8, t: usize, r: usize) -> u64 {
    let mut h = seed ^ 0x243F_6A88_85A3_08D3;
    for x in [scenario as u64, t as u64, r as u64] {
        h = (h ^ x).wrapping_mul(0x1000_0000_01B3).rotate_left(29);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: BenchMethod,
    pub order: Option<usize>,
    pub error: Option<String>,
    /// Penalized components of the merged model, per state (penalized fits).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub merged: Vec<Vec<f64>>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub scenario: u8,
    pub t: usize,
    pub replicate: usize,
    pub seed: u64,
    pub methods: Vec<MethodOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: BenchMethod,
    pub scenario: u8,
    pub t: usize,
    /// Selected order → number of replicates.
    pub counts: BTreeMap<usize, usize>,
    pub failures: usize,
    pub replicates: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_seconds: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub true_order: usize,
    pub cells: Vec<Cell>,
    /// Wall-clock seconds per fit, per method.
    pub timing: BTreeMap<String, Timing>,
    pub outcomes: Vec<ReplicateOutcome>,
    pub failures: usize,
}

/// Runs all methods on one simulated data set.
pub fn run_replicate(config: &BenchmarkConfig, scenario: u8, t: usize, replicate: usize) -> ReplicateOutcome {
    let seed = replicate_seed(config.seed, scenario, t, replicate);
    let mut out = ReplicateOutcome {
        scenario,
        t,
        replicate,
        seed,
        methods: Vec::new(),
    };
    let sim = match simulate(&ScenarioConfig::new(scenario, t, seed)) {
        Ok(s) => s,
        Err(e) => {
            out.methods = config
                .methods
                .iter()
                .map(|&m| MethodOutcome {
                    method: m,
                    order: None,
                    error: Some(e.to_string()),
                    merged: Vec::new(),
                    seconds: 0.0,
                })
                .collect();
            return out;
        }
    };
    let spec = EmissionSpec::new(vec![Family::Gamma]);
    let plain = sim.data.without_covariates();
    let mut ic = None;
    for &method in &config.methods {
        let start = Instant::now();
        let (order, error, merged) = match method {
            BenchMethod::Aic | BenchMethod::Bic => {
                if ic.is_none() {
                    ic = Some(ic_order_select(
                        &plain,
                        &config.orders,
                        &spec,
                        config.ic_restarts,
                        seed,
                        &FitOptions {
                            nonstationary: false,
                            ..config.fit
                        },
                    ));
                }
                match ic.as_ref().expect("set above") {
                    Ok(sel) => {
                        let r = if method == BenchMethod::Aic { &sel.aic } else { &sel.bic };
                        (Some(r.best().order), None, Vec::new())
                    }
                    Err(e) => (None, Some(e.to_string()), Vec::new()),
                }
            }
            BenchMethod::Dpmle | BenchMethod::DpmleCov => {
                let fit = FitOptions {
                    nonstationary: method == BenchMethod::DpmleCov,
                    ..config.fit
                };
                let search = SearchOptions { seed, ..config.search };
                match dpmle_order_select(&sim.data, &spec, config.n_upper, config.dpmle_restarts, &search, &fit) {
                    Ok(r) => {
                        let merged = r
                            .best
                            .merged
                            .emissions
                            .states
                            .iter()
                            .map(|s| s.penalized_vector())
                            .collect();
                        (Some(r.best.n_hat), None, merged)
                    }
                    Err(e) => (None, Some(e.to_string()), Vec::new()),
                }
            }
        };
        out.methods.push(MethodOutcome {
            method,
            order,
            error,
            merged,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    out
}

/// Tallies replicate outcomes into per-cell counts.
pub fn aggregate(config: &BenchmarkConfig, outcomes: Vec<ReplicateOutcome>) -> BenchmarkReport {
    let mut cells: BTreeMap<(u8, usize, BenchMethod), Cell> = BTreeMap::new();
    let mut times: BTreeMap<BenchMethod, Vec<f64>> = BTreeMap::new();
    let mut failures = 0;
    for o in &outcomes {
        for m in &o.methods {
            let cell = cells.entry((o.scenario, o.t, m.method)).or_insert_with(|| Cell {
                method: m.method,
                scenario: o.scenario,
                t: o.t,
                counts: BTreeMap::new(),
                failures: 0,
                replicates: 0,
                success_rate: 0.0,
            });
            cell.replicates += 1;
            match m.order {
                Some(k) => *cell.counts.entry(k).or_default() += 1,
                None => {
                    cell.failures += 1;
                    failures += 1;
                }
            }
            times.entry(m.method).or_default().push(m.seconds);
        }
    }
    let cells = cells
        .into_values()
        .map(|mut c| {
            c.success_rate = *c.counts.get(&TRUE_ORDER).unwrap_or(&0) as f64 / c.replicates as f64;
            c
        })
        .collect();
    let timing = times
        .into_iter()
        .map(|(m, v)| {
            let n = v.len() as f64;
            (
                m.name().to_string(),
                Timing {
                    mean_seconds: v.iter().sum::<f64>() / n,
                    min_seconds: v.iter().copied().fold(f64::INFINITY, f64::min),
                    max_seconds: v.iter().copied().fold(0.0, f64::max),
                },
            )
        })
        .collect();
    BenchmarkReport {
        config: config.clone(),
        true_order: TRUE_ORDER,
        cells,
        timing,
        outcomes,
        failures,
    }
}

/// Runs the whole grid, replicates in parallel. A failing method is
/// recorded in its replicate and the run continues.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    config.validate()?;
    let jobs: Vec<(u8, usize, usize)> = config
        .scenarios
        .iter()
        .flat_map(|&s| {
            config
                .lengths
                .iter()
                .flat_map(move |&t| (0..config.replicates).map(move |r| (s, t, r)))
        })
        .collect();
    let outcomes: Vec<ReplicateOutcome> = jobs
        .par_iter()
        .map(|&(s, t, r)| run_replicate(config, s, t, r))
        .collect();
    Ok(aggregate(config, outcomes))
}

/// Long-format rows `(method, scenario, T, order, count)`; failures use an
/// empty order.
pub fn long_format_rows(report: &BenchmarkReport) -> Vec<(String, u8, usize, Option<usize>, usize)> {
    let mut rows = Vec::new();
    for c in &report.cells {
        for (&k, &n) in &c.counts {
            rows.push((c.method.name().to_string(), c.scenario, c.t, Some(k), n));
        }
        if c.failures > 0 {
            rows.push((c.method.name().to_string(), c.scenario, c.t, None, c.failures));
        }
    }
    rows
}

pub fn write_long_csv<W: std::io::Write>(writer: W, report: &BenchmarkReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "scenario", "T", "order", "count"])?;
    for (m, s, t, k, n) in long_format_rows(report) {
        w.write_record([m, s.to_string(), t.to_string(), k.map(|k| k.to_string()).unwrap_or_default(), n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Wide table: one row per (method, scenario, T) with counts for each order
/// seen anywhere in the report, failures and the success rate.
pub fn write_table_csv<W: std::io::Write>(writer: W, report: &BenchmarkReport) -> Result<()> {
    let orders: Vec<usize> = {
        let mut v: Vec<usize> = report.cells.iter().flat_map(|c| c.counts.keys().copied()).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["method".to_string(), "scenario".into(), "T".into(), "replicates".into()];
    header.extend(orders.iter().map(|k| format!("n{k}")));
    header.extend(["failed".to_string(), "success_rate".to_string()]);
    w.write_record(&header)?;
    for c in &report.cells {
        let mut row = vec![
            c.method.name().to_string(),
            c.scenario.to_string(),
            c.t.to_string(),
            c.replicates.to_string(),
        ];
        row.extend(orders.iter().map(|k| c.counts.get(k).copied().unwrap_or(0).to_string()));
        row.push(c.failures.to_string());
        row.push(format!("{:.4}", c.success_rate));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_sum_to_replicates() {
        let config = BenchmarkConfig {
            replicates: 3,
            methods: vec![BenchMethod::Bic, BenchMethod::Dpmle],
            ..BenchmarkConfig::default()
        };
        let mk = |r, bic, dp: Option<usize>| ReplicateOutcome {
            scenario: 1,
            t: 5000,
            replicate: r,
            seed: 0,
            methods: vec![
                MethodOutcome {
                    method: BenchMethod::Bic,
                    order: Some(bic),
                    error: None,
                    merged: vec![],
                    seconds: 1.0,
                },
                MethodOutcome {
                    method: BenchMethod::Dpmle,
                    order: dp,
                    error: dp.is_none().then(|| "boom".to_string()),
                    merged: vec![],
                    seconds: 2.0,
                },
            ],
        };
        let rep = aggregate(&config, vec![mk(0, 3, Some(3)), mk(1, 4, None), mk(2, 3, Some(3))]);
        for c in &rep.cells {
            assert_eq!(c.counts.values().sum::<usize>() + c.failures, 3);
            assert!((0.0..=1.0).contains(&c.success_rate));
        }
        assert_eq!(rep.failures, 1);
        assert_eq!(long_format_rows(&rep).len(), 4);
    }

    #[test]
    fn replicate_seeds_differ() {
        let a = replicate_seed(1, 1, 5000, 0);
        assert_ne!(a, replicate_seed(1, 1, 5000, 1));
        assert_ne!(a, replicate_seed(1, 2, 5000, 0));
        assert_eq!(a, replicate_seed(1, 1, 5000, 0));
    }
}
