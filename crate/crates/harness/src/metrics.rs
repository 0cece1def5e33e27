//! Top-1 accuracy, harmonic mean and per-seed result records.

use std::collections::BTreeMap;

use applenet_core::baselines::BaselineKind;
use applenet_core::datagen::Protocol;
use applenet_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// `2bn / (b + n)` for accuracies in percent.
pub fn harmonic_mean(base: f64, new: f64) -> Result<f64> {
    if !(base > 0.0 && new > 0.0) || !base.is_finite() || !new.is_finite() {
        return Err(Error::Contract(format!(
            "harmonic mean needs positive accuracies, got {base} and {new}"
        )));
    }
    Ok(2.0 * base * new / (base + new))
}

/// Top-1 accuracy in percent.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || predicted.len() != labels.len() {
        return Err(Error::Contract("accuracy needs a nonempty, matching evaluation set".into()));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Harmonic mean of the `base` and `new` sets when both are present; a zero
/// accuracy on either side gives 0.
pub fn base_new_harmonic(acc: &BTreeMap<String, Option<f64>>) -> Option<f64> {
    let b = (*acc.get("base")?)?;
    let n = (*acc.get("new")?)?;
    if b == 0.0 || n == 0.0 {
        Some(0.0)
    } else {
        harmonic_mean(b, n).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    /// Accuracy per evaluation set; `None` when the method cannot score it.
    pub accuracies: BTreeMap<String, Option<f64>>,
    pub harmonic: Option<f64>,
    /// Training objective of the last step, if any step ran.
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config_hash: String,
    pub comparison_hash: String,
    pub method: BaselineKind,
    pub protocol: Protocol,
    pub eval_sets: Vec<String>,
    pub per_seed: Vec<SeedMetrics>,
    /// Arithmetic mean over seeds of each accuracy.
    pub mean: BTreeMap<String, Option<f64>>,
    /// Arithmetic mean over seeds of the per-seed harmonic means.
    pub mean_harmonic: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    let v = v?;
    if v.is_empty() {
        return None;
    }
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsRecord {
    pub fn from_seeds(
        config_hash: String,
        comparison_hash: String,
        method: BaselineKind,
        protocol: Protocol,
        per_seed: Vec<SeedMetrics>,
    ) -> Result<Self> {
        let first = per_seed
            .first()
            .ok_or_else(|| Error::Contract("metrics need at least one seed".into()))?;
        let eval_sets: Vec<String> = first.accuracies.keys().cloned().collect();
        let mean = eval_sets
            .iter()
            .map(|k| (k.clone(), mean_of(per_seed.iter().map(|s| s.accuracies.get(k).copied().flatten()))))
            .collect();
        let mean_harmonic = mean_of(per_seed.iter().map(|s| s.harmonic));
        Ok(Self {
            config_hash,
            comparison_hash,
            method,
            protocol,
            eval_sets,
            per_seed,
            mean,
            mean_harmonic,
        })
    }

    /// Largest absolute difference between corresponding numbers of two
    /// records, or `None` if their structure differs.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.eval_sets != other.eval_sets || self.per_seed.len() != other.per_seed.len() {
            return None;
        }
        let mut worst: f64 = 0.0;
        let mut cmp = |a: Option<f64>, b: Option<f64>| -> Option<()> {
            match (a, b) {
                (Some(x), Some(y)) => {
                    worst = worst.max((x - y).abs());
                    Some(())
                }
                (None, None) => Some(()),
                _ => None,
            }
        };
        for (a, b) in self.per_seed.iter().zip(&other.per_seed) {
            if a.seed != b.seed {
                return None;
            }
            for k in &self.eval_sets {
                cmp(a.accuracies[k], *b.accuracies.get(k)?)?;
            }
            cmp(a.harmonic, b.harmonic)?;
            cmp(a.final_loss, b.final_loss)?;
        }
        for k in &self.eval_sets {
            cmp(self.mean[k], *other.mean.get(k)?)?;
        }
        cmp(self.mean_harmonic, other.mean_harmonic)?;
        Some(worst)
    }
}
