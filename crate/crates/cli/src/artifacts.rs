//! Output directory bookkeeping, CSV/JSON writers and the run manifest.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub wall_time_seconds: f64,
    pub started_unix_seconds: f64,
    pub status: String,
    pub config: RunConfig,
}

pub const MANIFEST: &str = "manifest.json";

/// Collects every file a command writes.
#[derive(Debug)]
pub struct Output {
    dir: PathBuf,
    artifacts: Vec<String>,
}

/// Shortest round-trip text of a float.
pub fn num(v: f64) -> String {
    format!("{v}")
}

impl Output {
    pub fn create(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Output {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn artifacts(&self) -> &[String] {
        &self.artifacts
    }

    fn record(&mut self, name: &str) -> PathBuf {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.into());
        }
        self.dir.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> CliResult<PathBuf> {
        let path = self.record(name);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Run(format!("cannot serialise {name}: {e}")))?;
        self.write_text(name, &(text + "\n"))
    }

    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<PathBuf> {
        let path = self.record(name);
        let io = |e: csv::Error| CliError::Run(format!("writing {}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(io)?;
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    /// Writes `manifest.json`; it lists every artifact but itself.
    pub fn finish(
        &mut self,
        command: &str,
        config: &RunConfig,
        started: SystemTime,
        wall_time_seconds: f64,
        status: &str,
    ) -> CliResult<Manifest> {
        let m = Manifest {
            command: command.into(),
            config_hash: config.hash(),
            seed: config.seed,
            artifacts: self.artifacts.clone(),
            wall_time_seconds,
            started_unix_seconds: started
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
            status: status.into(),
            config: config.clone(),
        };
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&m).expect("manifest serialises");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(m)
    }
}

/// Reads a CSV with a header row of names and numeric cells.
pub fn read_table(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    let bad = |e: &dyn std::fmt::Display| CliError::Config(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(&e))?;
    let names: Vec<String> = r.headers().map_err(|e| bad(&e))?.iter().map(String::from).collect();
    let mut cols = vec![Vec::new(); names.len()];
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(&e))?;
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|e| bad(&e))?;
            cols[c].push(v);
        }
    }
    Ok((names, cols))
}

/// CSV columns that carry wall-clock measurements.
pub const TIMING_COLUMNS: [&str; 4] = ["wall_time_s", "solver_time_s", "mean_time_s", "std_time_s"];

/// CSV text with every cell of the timing columns blanked, for comparing
/// reruns.
pub fn mask_timing(path: &Path) -> CliResult<String> {
    let bad = |e: csv::Error| CliError::Run(format!("{}: {e}", path.display()));
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(bad)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut masked = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(bad)?;
        if i == 0 {
            masked = rec.iter().map(|h| TIMING_COLUMNS.contains(&h)).collect();
            w.write_record(&rec).map_err(bad)?;
            continue;
        }
        let row: Vec<&str> = rec
            .iter()
            .zip(&masked)
            .map(|(c, &m)| if m { "" } else { c })
            .collect();
        w.write_record(&row).map_err(bad)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Run(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
