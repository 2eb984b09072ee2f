//! Result tables, CSV emission and metadata sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::stats::Estimate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment_id: String,
    /// Empty for rows that summarize a whole ε grid.
    pub epsilon: Option<f64>,
    pub statistic_id: String,
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
    pub censored_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        experiment_id: &str,
        epsilon: Option<f64>,
        statistic_id: impl Into<String>,
        value: f64,
        std_error: f64,
        n: usize,
        censored_count: usize,
    ) {
        self.rows.push(ResultRow {
            experiment_id: experiment_id.to_string(),
            epsilon,
            statistic_id: statistic_id.into(),
            value,
            std_error: if std_error > 0.0 { std_error } else { 0.0 },
            n,
            censored_count,
        });
    }

    pub fn push_estimate(
        &mut self,
        experiment_id: &str,
        epsilon: Option<f64>,
        statistic_id: impl Into<String>,
        e: &Estimate,
        censored_count: usize,
    ) {
        self.push(experiment_id, epsilon, statistic_id, e.mean, e.std_error, e.n, censored_count);
    }

    pub fn extend(&mut self, other: ResultTable) {
        self.rows.extend(other.rows);
    }

    pub fn get(&self, epsilon: Option<f64>, statistic_id: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.epsilon == epsilon && r.statistic_id == statistic_id)
    }

    pub fn find(&self, experiment_id: &str, epsilon: Option<f64>, statistic_id: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.experiment_id == experiment_id && r.epsilon == epsilon && r.statistic_id == statistic_id)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record([
            "experiment_id",
            "epsilon",
            "statistic_id",
            "value",
            "std_error",
            "n",
            "censored_count",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.experiment_id.clone(),
                r.epsilon.map(fmt_f64).unwrap_or_default(),
                r.statistic_id.clone(),
                fmt_f64(r.value),
                fmt_f64(r.std_error),
                r.n.to_string(),
                r.censored_count.to_string(),
            ])?;
        }
        Ok(w.into_inner().map_err(|e| e.into_error())?)
    }
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Contents of the JSON file written next to every CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub file: String,
    pub seed: u64,
    pub version: String,
    pub config_hash: String,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub seed: u64,
    pub config_hash: String,
}

/// Writes `bytes` to `dir/name` and `dir/<stem>.meta.json`.
pub fn write_csv_with_sidecar(dir: &Path, name: &str, bytes: &[u8], rows: usize, meta: &RunMeta) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, bytes)?;
    let stem = name.strip_suffix(".csv").unwrap_or(name);
    let side = Sidecar {
        file: name.to_string(),
        seed: meta.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: meta.config_hash.clone(),
        rows,
    };
    fs::write(dir.join(format!("{stem}.meta.json")), serde_json::to_string_pretty(&side)?)?;
    Ok(path)
}

pub fn emit_results(table: &ResultTable, dir: &Path, name: &str, meta: &RunMeta) -> Result<PathBuf> {
    write_csv_with_sidecar(dir, name, &table.to_csv()?, table.rows.len(), meta)
}

/// RFC-4180 bytes for a header and rows of already formatted cells.
pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}
