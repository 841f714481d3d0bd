use std::path::Path;

use serde::Serialize;

use plaquenet::solver::{IntegrationConfig, OutputGrid, SolverStats};

use crate::config::SolverConfig;
use crate::CliError;

/// Shortest representation that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn integration_config(s: &SolverConfig) -> IntegrationConfig {
    let t_end = s.t_end();
    let output = match s.samples {
        Some(n) => OutputGrid::Times((0..=n).map(|k| t_end * k as f64 / n as f64).collect()),
        None => OutputGrid::Steps,
    };
    IntegrationConfig {
        rel_tol: s.rel_tol,
        abs_tol: s.abs_tol,
        max_steps: s.max_steps,
        output,
        ..IntegrationConfig::default()
    }
}

#[derive(Debug, Serialize)]
pub struct StatsSummary {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

impl From<SolverStats> for StatsSummary {
    fn from(s: SolverStats) -> Self {
        Self {
            accepted: s.accepted,
            rejected: s.rejected,
            evaluations: s.evaluations,
        }
    }
}
