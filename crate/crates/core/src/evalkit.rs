//! Metrics, run results and the aggregate CSV report.
//!
//! This is the only module that can open [`SealedLabels`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autonet::{Checkpoint, NetParams};
use crate::data::{DomainDataset, SealedLabels, Task};
use crate::error::{Error, Result};
use crate::labelers::PseudoLabel;
use crate::ndmath::{argmax, Matrix};
use crate::trainer::{LossBreakdown, Method, TrainConfig};

/// Capability to read sealed evaluation labels.
pub struct EvalToken(());

#[cfg(test)]
pub(crate) fn with_token<T>(f: impl FnOnce(&EvalToken) -> T) -> T {
    f(&EvalToken(()))
}

pub fn accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    if preds.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), truth.len())));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let correct = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    /// Recall per class; `None` when the class never occurs in the truth.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over the defined entries.
    pub mean: f64,
    pub warnings: Vec<String>,
}

pub fn per_class_mean_accuracy(preds: &[usize], truth: &[usize], class_count: usize) -> Result<ClassAccuracy> {
    if preds.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), truth.len())));
    }
    let mut hits = vec![0usize; class_count];
    let mut totals = vec![0usize; class_count];
    for (&p, &t) in preds.iter().zip(truth) {
        if t >= class_count {
            return Err(Error::InvalidArgument(format!("label {t} out of range for {class_count} classes")));
        }
        totals[t] += 1;
        hits[t] += usize::from(p == t);
    }
    let mut warnings = Vec::new();
    let per_class: Vec<Option<f64>> = (0..class_count)
        .map(|k| {
            if totals[k] == 0 {
                warnings.push(format!("class {k} absent from evaluation labels; excluded from mean"));
                None
            } else {
                Some(hits[k] as f64 / totals[k] as f64)
            }
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(ClassAccuracy { per_class, mean, warnings })
}

/// Accuracy of `pseudo[i]` against the sealed label at `positions[i]`,
/// skipping unknown truths. `None` when nothing can be scored.
pub fn pseudo_label_quality(pseudo: &[PseudoLabel], hidden: &SealedLabels, positions: &[usize]) -> Option<f64> {
    let truth = hidden.reveal(&EvalToken(()));
    let (mut scored, mut correct) = (0usize, 0usize);
    for (p, &pos) in pseudo.iter().zip(positions) {
        if let Some(Some(t)) = truth.get(pos) {
            scored += 1;
            correct += usize::from(p.label == *t);
        }
    }
    (scored > 0).then(|| correct as f64 / scored as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Accuracy on unlabeled target samples with known truth.
    pub target_accuracy: Option<f64>,
    pub target_mean_class_accuracy: Option<f64>,
    pub target_per_class_accuracy: Vec<Option<f64>>,
    pub source_accuracy: Option<f64>,
    pub warnings: Vec<String>,
}

fn predict(params: &NetParams, x: &Matrix) -> Result<Vec<usize>> {
    if x.rows() == 0 {
        return Ok(Vec::new());
    }
    let cache = params.forward(x)?;
    Ok(cache.probs.row_iter().map(|r| argmax(r).unwrap_or(0)).collect())
}

pub fn evaluate(params: &NetParams, ds: &DomainDataset) -> Result<Metrics> {
    let view = ds.training_view();
    let truth = ds.hidden_labels().reveal(&EvalToken(()));
    let preds = predict(params, &view.target_unlabeled_x)?;
    let (p, t): (Vec<usize>, Vec<usize>) = preds.iter().zip(truth).filter_map(|(&p, t)| t.map(|t| (p, t))).unzip();
    let mut warnings = Vec::new();
    let (target_accuracy, target_mean_class_accuracy, target_per_class_accuracy) = if t.is_empty() {
        warnings.push("no target evaluation labels; target metrics undefined".to_string());
        (None, None, vec![None; ds.class_count()])
    } else {
        let pc = per_class_mean_accuracy(&p, &t, ds.class_count())?;
        warnings.extend(pc.warnings);
        (Some(accuracy(&p, &t)?), Some(pc.mean), pc.per_class)
    };
    let source_preds = predict(params, &view.source_x)?;
    let source_accuracy = if source_preds.is_empty() { None } else { Some(accuracy(&source_preds, &view.source_y)?) };
    Ok(Metrics { target_accuracy, target_mean_class_accuracy, target_per_class_accuracy, source_accuracy, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: TrainConfig,
    pub method: Method,
    pub task: Task,
    pub seed: u64,
    pub metrics: Metrics,
    pub loss_curve: Vec<LossBreakdown>,
    /// Pseudo-label accuracy on each iteration's target batch.
    pub pseudo_label_accuracy: Vec<Option<f64>>,
    pub wall_clock_seconds: f64,
    pub params_checksum: String,
    pub final_params: Checkpoint,
}

impl RunResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run result serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

pub const REPORT_HEADER: &str =
    "kind,config_hash,method,task,seed,accuracy,accuracy_std,mean_class_accuracy,mean_class_accuracy_std,runtime_seconds";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One `run` row per result, then one `group` row per (method, task) with
/// mean and std across its runs; `skipped` adds a trailing `footer` row.
pub fn report_csv(results: &[RunResult], skipped: &[String]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    let mut groups: BTreeMap<(&str, &str), Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        writeln!(
            out,
            "run,{},{},{},{},{},,{},,{}",
            r.config.hash(),
            r.method.as_str(),
            r.task.as_str(),
            r.seed,
            fmt_opt(r.metrics.target_accuracy),
            fmt_opt(r.metrics.target_mean_class_accuracy),
            r.wall_clock_seconds
        )
        .unwrap();
        groups.entry((r.method.as_str(), r.task.as_str())).or_default().push(r);
    }
    for ((method, task), runs) in groups {
        let stat = |f: fn(&RunResult) -> Option<f64>| {
            let v: Vec<f64> = runs.iter().filter_map(|r| f(r)).collect();
            if v.is_empty() {
                (String::new(), String::new())
            } else {
                let (m, s) = mean_std(&v);
                (m.to_string(), s.to_string())
            }
        };
        let (acc, acc_std) = stat(|r| r.metrics.target_accuracy);
        let (mca, mca_std) = stat(|r| r.metrics.target_mean_class_accuracy);
        let runtime = runs.iter().map(|r| r.wall_clock_seconds).sum::<f64>() / runs.len() as f64;
        writeln!(out, "group,,{method},{task},n={},{acc},{acc_std},{mca},{mca_std},{runtime}", runs.len()).unwrap();
    }
    if !skipped.is_empty() {
        writeln!(out, "footer,skipped {} unreadable file(s): {},,,,,,,,", skipped.len(), skipped.join(" ")).unwrap();
    }
    out
}
