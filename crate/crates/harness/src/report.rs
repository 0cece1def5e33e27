//! Result files on disk and the summary tables built from them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use applenet_core::datagen::{plan_split, ProtocolSplit};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsRecord;
use crate::sweep::SweepResult;

/// Environment variable naming the output root directory.
pub const OUT_ENV: &str = "APPLENET_OUT";
pub const DEFAULT_OUT: &str = "runs";
pub const RUN_FILE: &str = "metrics.json";
pub const SWEEP_FILE: &str = "sweep.json";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// A finished `run`: config, metrics and the per-seed splits it used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub record: MetricsRecord,
    pub splits: Vec<ProtocolSplit>,
}

impl RunResult {
    pub fn new(config: ExperimentConfig, record: MetricsRecord) -> Result<Self> {
        let channels = config.encoder.in_channels;
        let splits = config
            .seeds
            .iter()
            .map(|&s| plan_split(config.protocol, &config.data, config.shots, s, channels))
            .collect::<applenet_core::Result<Vec<_>>>()?;
        Ok(Self { config, record, splits })
    }

    pub fn dir_name(&self) -> String {
        format!("run-{}-{}", self.record.method, short(&self.record.config_hash))
    }

    /// Writes `metrics.json`, `metrics.csv` and `config.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let json = dir.join(RUN_FILE);
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| HarnessError::io(&json, e))?;
        let cfg = dir.join("config.json");
        fs::write(&cfg, self.config.to_json()).map_err(|e| HarnessError::io(&cfg, e))?;

        let csv_path = dir.join("metrics.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        let r = &self.record;
        let mut header = vec!["seed".to_string()];
        header.extend(r.eval_sets.iter().cloned());
        header.extend(["harmonic".to_string(), "final_loss".into(), "config_hash".into()]);
        w.write_record(&header)?;
        for s in &r.per_seed {
            let mut row = vec![s.seed.to_string()];
            row.extend(r.eval_sets.iter().map(|k| fmt_opt(s.accuracies.get(k).copied().flatten())));
            row.extend([fmt_opt(s.harmonic), fmt_opt(s.final_loss), r.config_hash.clone()]);
            w.write_record(&row)?;
        }
        let mut mean = vec!["mean".to_string()];
        mean.extend(r.eval_sets.iter().map(|k| fmt_opt(r.mean.get(k).copied().flatten())));
        mean.extend([fmt_opt(r.mean_harmonic), String::new(), r.config_hash.clone()]);
        w.write_record(&mean)?;
        w.flush().map_err(|e| HarnessError::io(&csv_path, e))?;
        Ok(())
    }
}

pub fn sweep_dir_name(result: &SweepResult) -> String {
    format!("sweep-{}-{}", result.axis, short(&result.base_hash))
}

/// Writes `sweep.json` and `sweep.csv` under `dir`.
pub fn write_sweep(result: &SweepResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    result.write_json(&dir.join(SWEEP_FILE))?;
    result.write_csv(&dir.join("sweep.csv"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "n/a".into())
}

/// Everything found under one results directory.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub runs: Vec<RunResult>,
    pub sweeps: Vec<SweepResult>,
}

impl Report {
    /// Recursively loads every run and sweep result below `dir`.
    pub fn collect(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(HarnessError::Core(applenet_core::Error::Contract(format!(
                "{} is not a directory",
                dir.display()
            ))));
        }
        let mut report = Report::default();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            let mut entries: Vec<PathBuf> = fs::read_dir(&d)
                .map_err(|e| HarnessError::io(&d, e))?
                .map(|e| e.map(|e| e.path()).map_err(|err| HarnessError::io(&d, err)))
                .collect::<Result<_>>()?;
            entries.sort();
            for p in entries {
                if p.is_dir() {
                    stack.push(p);
                } else if p.file_name().is_some_and(|n| n == RUN_FILE) {
                    let text = fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
                    report.runs.push(serde_json::from_str(&text)?);
                } else if p.file_name().is_some_and(|n| n == SWEEP_FILE) {
                    let text = fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
                    report.sweeps.push(serde_json::from_str(&text)?);
                }
            }
        }
        report.runs.sort_by_key(|r| (r.record.protocol.to_string(), r.record.method.as_str(), r.record.config_hash.clone()));
        report.sweeps.sort_by(|a, b| (a.axis.as_str(), &a.base_hash).cmp(&(b.axis.as_str(), &b.base_hash)));
        Ok(report)
    }

    /// Plain-text tables: one for runs, one per sweep.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if !self.runs.is_empty() {
            let mut sets: Vec<String> = Vec::new();
            for r in &self.runs {
                for s in &r.record.eval_sets {
                    if !sets.contains(s) {
                        sets.push(s.clone());
                    }
                }
            }
            let _ = writeln!(out, "runs (mean over seeds, top-1 %)");
            let _ = write!(out, "{:<12} {:<9}", "method", "protocol");
            for s in &sets {
                let _ = write!(out, " {s:>9}");
            }
            let _ = writeln!(out, " {:>9}  config", "H");
            for r in &self.runs {
                let rec = &r.record;
                let _ = write!(out, "{:<12} {:<9}", rec.method.as_str(), rec.protocol.to_string());
                for s in &sets {
                    let _ = write!(out, " {:>9}", cell(rec.mean.get(s).copied().flatten()));
                }
                let _ = writeln!(out, " {:>9}  {}", cell(rec.mean_harmonic), short(&rec.config_hash));
            }
        }
        for sw in &self.sweeps {
            if !out.is_empty() {
                out.push('\n');
            }
            let sets = sw.eval_sets();
            let _ = writeln!(out, "sweep {} (base config {})", sw.axis, short(&sw.base_hash));
            let _ = write!(out, "{:<10}", "value");
            for s in &sets {
                let _ = write!(out, " {s:>9}");
            }
            let _ = writeln!(out, " {:>9}", "H");
            for row in &sw.rows {
                let _ = write!(out, "{:<10}", row.value);
                for s in &sets {
                    let _ = write!(out, " {:>9}", cell(row.record.mean.get(s).copied().flatten()));
                }
                let _ = writeln!(out, " {:>9}", cell(row.record.mean_harmonic));
            }
        }
        if out.is_empty() {
            out.push_str("no results found\n");
        }
        out
    }
}
