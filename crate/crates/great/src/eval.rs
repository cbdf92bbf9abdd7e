//! Accuracy metrics, robustness sweeps, and evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attacks::{run_attack, AttackConfig, AttackMethod};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::nn::{forward_eval, ModelSpec, ParamSet};
use crate::tensor::Tensor;

/// Predicted class per sample: the argmax of the eval-mode logits, with
/// exact ties resolved toward the lower class index.
pub fn predict(spec: &ModelSpec, params: &ParamSet, x: &Tensor) -> Result<Vec<usize>> {
    let (logits, _) = forward_eval(spec, params, x.shape().to_vec(), x.values().to_vec())?;
    let classes = logits.shape()[1];
    let n = logits.shape()[0];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = logits.row(i)?;
        let mut best = 0usize;
        for j in 1..classes {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Fraction of samples whose prediction matches the stored label.
///
/// Uses every sample, labeled mask or not: the mask hides labels from
/// training, never from evaluation.
pub fn accuracy(spec: &ModelSpec, params: &ParamSet, data: &Dataset) -> Result<f64> {
    data.validate()?;
    let preds = predict(spec, params, &data.x)?;
    let correct = preds.iter().zip(&data.y).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

/// White-box robust accuracy: perturb every sample against this very model
/// with its true label, then measure accuracy on the perturbed batch.
pub fn robust_accuracy(
    spec: &ModelSpec,
    params: &ParamSet,
    data: &Dataset,
    method: AttackMethod,
    config: &AttackConfig,
) -> Result<f64> {
    data.validate()?;
    config.validate()?;
    let adv = run_attack(method, spec, params, &data.x, &data.y, config, None)?;
    let preds = predict(spec, params, &adv)?;
    let correct = preds.iter().zip(&data.y).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Robust accuracy across a grid of budgets; the budgets are returned with
/// their accuracies so callers can log or plot them directly.
pub fn epsilon_sweep(
    spec: &ModelSpec,
    params: &ParamSet,
    data: &Dataset,
    method: AttackMethod,
    config: &AttackConfig,
    epsilons: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let cfg = AttackConfig {
            epsilon: eps,
            ..*config
        };
        out.push((eps, robust_accuracy(spec, params, data, method, &cfg)?));
    }
    Ok(out)
}

/// One evaluated cell of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    /// Which model/configuration produced this row (e.g. a mode name).
    pub model: String,
    /// Which split or dataset the metric was computed on.
    pub split: String,
    /// Attack used; "none" for clean accuracy.
    pub attack: String,
    pub epsilon: f64,
    pub accuracy: f64,
}

/// Evaluation results plus a fingerprint of the configuration that produced
/// them, so reports can be traced back to an exact setup.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Hex sha-256 of the canonical JSON of the run configuration.
    pub config_sha256: String,
    pub rows: Vec<EvalRow>,
}

/// Hex sha-256 over a value's canonical JSON encoding.
pub fn config_fingerprint<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_string(config)
        .map_err(|e| Error::Config(format!("config not serializable: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(digest.len() * 2);
    for byte in digest {
        write!(hex, "{byte:02x}").unwrap();
    }
    Ok(hex)
}

impl EvalReport {
    pub fn new<T: Serialize>(config: &T, rows: Vec<EvalRow>) -> Result<EvalReport> {
        Ok(EvalReport {
            config_sha256: config_fingerprint(config)?,
            rows,
        })
    }

    /// CSV rendering: a fingerprint comment line, a header, one row per cell.
    /// Floats use 17 significant digits so files are byte-stable.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# config_sha256 {}", self.config_sha256).unwrap();
        writeln!(out, "model,split,attack,epsilon,accuracy").unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.17e},{:.17e}",
                r.model, r.split, r.attack, r.epsilon, r.accuracy
            )
            .unwrap();
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_csv_string().as_bytes())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("report not serializable: {e}")))?;
        fsutil::write_atomic(path, format!("{json}\n").as_bytes())
    }
}
