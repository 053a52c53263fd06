//! TOML run configuration. Every key is optional; command-line flags win
//! over file values, file values win over built-in defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub preprocess: PreprocessSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub scenario: Option<u8>,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    pub seed: Option<u64>,
    pub name: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSection {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub summary: Option<PathBuf>,
    pub gap_hours: Option<usize>,
    pub min_fixes: Option<usize>,
    pub max_missing_frac: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub data: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub method: Option<String>,
    pub orders: Option<Vec<usize>>,
    pub n_upper: Option<usize>,
    pub draws: Option<usize>,
    pub restarts: Option<usize>,
    pub seed: Option<u64>,
    pub nonstationary: Option<bool>,
    pub covariates: Option<Vec<String>>,
    pub families: Option<Vec<String>>,
    pub likelihood: Option<String>,
    pub log_m_lambda: Option<[f64; 2]>,
    pub c_n: Option<[f64; 2]>,
    pub a: Option<f64>,
    pub merge_tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub strict: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    pub scenarios: Option<Vec<u8>>,
    pub lengths: Option<Vec<usize>>,
    pub replicates: Option<usize>,
    pub seed: Option<u64>,
    pub methods: Option<Vec<String>>,
    pub orders: Option<Vec<usize>>,
    pub n_upper: Option<usize>,
    pub ic_restarts: Option<usize>,
    pub dpmle_restarts: Option<usize>,
    pub draws: Option<usize>,
    pub likelihood: Option<String>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub name: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

/// First present value: flag, then file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
