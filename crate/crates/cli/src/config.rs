use std::path::Path;

use loadrec::eval::RocOptions;
use loadrec::io::read_json;
use loadrec::synth::{Case, ScenarioSpec};
use loadrec::{NoiseSpec, SolverConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const TOOL_VERSION: &str = concat!("loadrec ", env!("CARGO_PKG_VERSION"));

/// Everything a run depends on. Written next to every output so the run can
/// be repeated with `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Ignored on input.
    pub tool_version: String,
    pub case: Option<Case>,
    pub scenario: ScenarioSpec,
    pub noise: NoiseSpec,
    pub solver: SolverConfig,
    pub skip_postprocess: bool,
    pub roc: RocOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            case: None,
            scenario: ScenarioSpec::default(),
            noise: NoiseSpec::default(),
            solver: SolverConfig::default(),
            skip_postprocess: false,
            roc: RocOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg: RunConfig = match path {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        cfg.tool_version = TOOL_VERSION.to_string();
        Ok(cfg)
    }
}

/// `7`, `1-10` or `1,4,9`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("cannot parse seeds {text:?}; use 7, 1-10 or 1,4,9");
    if let Some((a, b)) = text.split_once('-') {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect()
}

/// `start:stop:count` grid, inclusive of both ends.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, String> {
    let bad = || format!("cannot parse grid {text:?}; use start:stop:count");
    let parts: Vec<&str> = text.split(':').collect();
    let [a, b, n] = parts.as_slice() else {
        return Err(bad());
    };
    let a: f64 = a.parse().map_err(|_| bad())?;
    let b: f64 = b.parse().map_err(|_| bad())?;
    let n: usize = n.parse().map_err(|_| bad())?;
    if n < 2 || !(b > a) {
        return Err(bad());
    }
    Ok((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect())
}
