//! One-axis ablation sweeps.
//!
//! Every row copies the base config and changes exactly one setting. Rows
//! run in parallel; results come back in axis order.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use applenet_core::losses::DEFAULT_CRP_WEIGHT;
use applenet_core::promptcore::{ClassPosition, InitMode};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsRecord;
use crate::train::{run_experiment, BackboneCache};

pub const SHOTS: [usize; 5] = [1, 4, 8, 16, 32];
pub const CONTEXT_LENGTHS: [usize; 4] = [1, 4, 8, 16];
pub const ATTENTION_MODULES: [usize; 4] = [0, 1, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Shots,
    ContextLength,
    ClsPosition,
    AttentionModules,
    MsLayers,
    CrpToggle,
    InitMode,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 7] = [
        SweepAxis::Shots,
        SweepAxis::ContextLength,
        SweepAxis::ClsPosition,
        SweepAxis::AttentionModules,
        SweepAxis::MsLayers,
        SweepAxis::CrpToggle,
        SweepAxis::InitMode,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Shots => "shots",
            SweepAxis::ContextLength => "context_length",
            SweepAxis::ClsPosition => "cls_position",
            SweepAxis::AttentionModules => "attention_modules",
            SweepAxis::MsLayers => "ms_layers",
            SweepAxis::CrpToggle => "crp_toggle",
            SweepAxis::InitMode => "init_mode",
        }
    }

    /// Labelled configs, one per row.
    ///
    /// Context lengths other than four cannot start from the four-word
    /// manual phrase, so that axis uses random initialization on every row.
    pub fn configs(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            SweepAxis::Shots => SHOTS.iter().map(|&k| (k.to_string(), with(&|c| c.shots = k))).collect(),
            SweepAxis::ContextLength => CONTEXT_LENGTHS
                .iter()
                .map(|&m| {
                    let cfg = with(&|c| {
                        c.context_length = m;
                        c.init_mode = InitMode::Random;
                    });
                    (m.to_string(), cfg)
                })
                .collect(),
            SweepAxis::ClsPosition => [ClassPosition::Front, ClassPosition::Middle, ClassPosition::End]
                .iter()
                .map(|&p| (label(&p), with(&|c| c.cls_position = p)))
                .collect(),
            SweepAxis::AttentionModules => ATTENTION_MODULES
                .iter()
                .map(|&q| (q.to_string(), with(&|c| c.attention_modules = q)))
                .collect(),
            SweepAxis::MsLayers => (1..=base.encoder.layers())
                .map(|l| (l.to_string(), with(&|c| c.ms_layers = Some(l))))
                .collect(),
            SweepAxis::CrpToggle => {
                let on = if base.crp_weight > 0.0 { base.crp_weight } else { DEFAULT_CRP_WEIGHT };
                vec![
                    ("on".to_string(), with(&|c| c.crp_weight = on)),
                    ("off".to_string(), with(&|c| c.crp_weight = 0.0)),
                ]
            }
            SweepAxis::InitMode => [InitMode::Manual, InitMode::Random, InitMode::Zeros]
                .iter()
                .map(|&m| (label(&m), with(&|c| c.init_mode = m)))
                .collect(),
        }
    }
}

/// Serde name of a unit enum variant.
fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            let known: Vec<&str> = SweepAxis::ALL.iter().map(|a| a.as_str()).collect();
            HarnessError::Core(applenet_core::Error::Contract(format!(
                "unknown sweep axis {s:?}; expected one of {}",
                known.join(", ")
            )))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub config: ExperimentConfig,
    pub record: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    /// Hash of the config the rows were derived from.
    pub base_hash: String,
    pub rows: Vec<SweepRow>,
}

pub fn run_sweep(axis: SweepAxis, base: &ExperimentConfig, cache: &BackboneCache) -> Result<SweepResult> {
    let configs = axis.configs(base);
    for (_, c) in &configs {
        c.validate()?;
    }
    let rows = configs
        .into_par_iter()
        .map(|(value, config)| {
            let record = run_experiment(&config, cache)?;
            Ok(SweepRow { value, config, record })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { axis, base_hash: base.hash(), rows })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

impl SweepResult {
    /// Evaluation set names over all rows, in first-seen order.
    pub fn eval_sets(&self) -> Vec<String> {
        let mut sets: Vec<String> = Vec::new();
        for r in &self.rows {
            for s in &r.record.eval_sets {
                if !sets.contains(s) {
                    sets.push(s.clone());
                }
            }
        }
        sets
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let sets = self.eval_sets();
        let mut header = vec!["axis".to_string(), "value".into(), "method".into(), "protocol".into()];
        header.extend(sets.iter().map(|s| format!("mean_{s}")));
        header.extend(["mean_harmonic".to_string(), "config_hash".into()]);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                self.axis.to_string(),
                r.value.clone(),
                r.record.method.to_string(),
                r.record.protocol.to_string(),
            ];
            rec.extend(sets.iter().map(|s| fmt_opt(r.record.mean.get(s).copied().flatten())));
            rec.extend([fmt_opt(r.record.mean_harmonic), r.record.config_hash.clone()]);
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| HarnessError::io(path, e))?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
    }
}
