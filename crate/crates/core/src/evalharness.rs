//! Metrics, Table-style reports and precision/recall curve data.
//!
//! The positive class is always remove (1).

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llmclient::{Decision, Verdict};
use crate::{par, REMOVE};

pub const REPORT_HEADER: &str = "model,accuracy,auroc,f1,precision,recall,missing_answers,n_evaluated";
pub const POSITIVE_CLASS_NOTE: &str = "# positive_class=remove(1),threshold=0.5";

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{labels} labels but {predictions} predictions")]
    LengthMismatch { labels: usize, predictions: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("prediction {0} is not a binary label")]
    NotBinary(u8),
    #[error("AUROC needs both classes (got {positives} positives of {total})")]
    SingleClass { positives: usize, total: usize },
    #[error("score at index {0} is not a number")]
    NanScore(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(labels: &[u8], predictions: &[u8]) -> Result<Confusion, EvalError> {
    if labels.len() != predictions.len() {
        return Err(EvalError::LengthMismatch {
            labels: labels.len(),
            predictions: predictions.len(),
        });
    }
    let mut c = Confusion::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        if p > 1 {
            return Err(EvalError::NotBinary(p));
        }
        match (y == REMOVE, p == REMOVE) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No positive predictions; precision reported as 0.
    pub precision_undefined: bool,
    /// No positive labels; recall reported as 0.
    pub recall_undefined: bool,
}

impl Metrics {
    pub fn from_confusion(c: &Confusion) -> Result<Self, EvalError> {
        let n = c.total();
        if n == 0 {
            return Err(EvalError::Empty);
        }
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                (0.0, true)
            } else {
                (num as f64 / den as f64, false)
            }
        };
        let (precision, precision_undefined) = ratio(c.tp, c.tp + c.fp);
        let (recall, recall_undefined) = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Ok(Self {
            accuracy: (c.tp + c.tn) as f64 / n as f64,
            precision,
            recall,
            f1,
            precision_undefined,
            recall_undefined,
        })
    }
}

pub fn metrics(labels: &[u8], predictions: &[u8]) -> Result<Metrics, EvalError> {
    Metrics::from_confusion(&confusion(labels, predictions)?)
}

fn check_scores(labels: &[u8], scores: &[f64]) -> Result<(usize, usize), EvalError> {
    if labels.len() != scores.len() {
        return Err(EvalError::LengthMismatch {
            labels: labels.len(),
            predictions: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(EvalError::NanScore(i));
    }
    let pos = labels.iter().filter(|&&y| y == REMOVE).count();
    if pos == 0 || pos == labels.len() {
        return Err(EvalError::SingleClass {
            positives: pos,
            total: labels.len(),
        });
    }
    Ok((pos, labels.len() - pos))
}

/// Mann-Whitney AUROC: probability that a random positive outscores a random
/// negative, ties counted one half. Computed from mid-ranks.
pub fn auroc(labels: &[u8], scores: &[f64]) -> Result<f64, EvalError> {
    let (n_pos, n_neg) = check_scores(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // ranks doubled so tie midpoints stay integral
    let mut pos_rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            if labels[k] == REMOVE {
                pos_rank_sum2 += mid2;
            }
        }
        i = j + 1;
    }
    let n_pos64 = n_pos as u64;
    let u2 = pos_rank_sum2 - n_pos64 * (n_pos64 + 1);
    Ok(u2 as f64 / (2 * n_pos64 * n_neg as u64) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall at every distinct score threshold, highest first.
pub fn precision_recall_curve(labels: &[u8], scores: &[f64]) -> Result<Vec<PrPoint>, EvalError> {
    let (n_pos, _) = check_scores(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] == REMOVE {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order.get(rank + 1).is_none_or(|&n| scores[n] != scores[k]);
        if last_of_tie {
            out.push(PrPoint {
                threshold: scores[k],
                precision: tp as f64 / (tp + fp) as f64,
                recall: tp as f64 / n_pos as f64,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    /// Drop missing answers from the denominator and report their count.
    #[default]
    Exclude,
    /// Count every missing answer as a wrong prediction.
    Strict,
}

/// Per-example model outputs, homogeneous by construction.
#[derive(Debug, Clone, Copy)]
pub enum RunOutputs<'a> {
    Probabilities(&'a [f64]),
    Verdicts(&'a [Verdict]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub missing_answers: Option<usize>,
    pub n_evaluated: usize,
}

impl EvalReport {
    /// CSV row with metrics rounded to 3 decimals; `/` marks absent values.
    pub fn display_row(&self) -> String {
        let r3 = |v: f64| format!("{v:.3}");
        format!(
            "{},{},{},{},{},{},{},{}",
            self.model,
            r3(self.accuracy),
            self.auroc.map_or("/".to_string(), r3),
            r3(self.f1),
            r3(self.precision),
            r3(self.recall),
            self.missing_answers.map_or("/".to_string(), |m| m.to_string()),
            self.n_evaluated
        )
    }
}

pub fn evaluate_run(
    model: &str,
    labels: &[u8],
    outputs: RunOutputs<'_>,
    policy: MissingPolicy,
) -> Result<EvalReport, EvalError> {
    match outputs {
        RunOutputs::Probabilities(p) => {
            if p.len() != labels.len() {
                return Err(EvalError::LengthMismatch {
                    labels: labels.len(),
                    predictions: p.len(),
                });
            }
            let preds: Vec<u8> = p.iter().map(|&x| (x >= 0.5) as u8).collect();
            let m = metrics(labels, &preds)?;
            Ok(EvalReport {
                model: model.to_string(),
                accuracy: m.accuracy,
                auroc: Some(auroc(labels, p)?),
                f1: m.f1,
                precision: m.precision,
                recall: m.recall,
                missing_answers: None,
                n_evaluated: labels.len(),
            })
        }
        RunOutputs::Verdicts(v) => {
            if v.len() != labels.len() {
                return Err(EvalError::LengthMismatch {
                    labels: labels.len(),
                    predictions: v.len(),
                });
            }
            let mut ys = Vec::with_capacity(labels.len());
            let mut preds = Vec::with_capacity(labels.len());
            let mut missing = 0;
            for (&y, verdict) in labels.iter().zip(v) {
                match verdict.decision {
                    Decision::Keep | Decision::Remove => {
                        ys.push(y);
                        preds.push(verdict.decision.label().unwrap_or(0));
                    }
                    Decision::Missing => {
                        missing += 1;
                        if policy == MissingPolicy::Strict {
                            ys.push(y);
                            preds.push(1 - y.min(1));
                        }
                    }
                }
            }
            let m = metrics(&ys, &preds)?;
            Ok(EvalReport {
                model: model.to_string(),
                accuracy: m.accuracy,
                auroc: None,
                f1: m.f1,
                precision: m.precision,
                recall: m.recall,
                missing_answers: Some(missing),
                n_evaluated: ys.len(),
            })
        }
    }
}

/// Sorts by accuracy (descending), ties broken by model name.
pub fn sort_reports(reports: &mut [EvalReport]) {
    reports.sort_by(|a, b| {
        b.accuracy
            .partial_cmp(&a.accuracy)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.model.cmp(&b.model))
    });
}

/// The display table: positive-class note, header, one rounded row per model.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut sorted = reports.to_vec();
    sort_reports(&mut sorted);
    let mut out = format!("{POSITIVE_CLASS_NOTE}\n{REPORT_HEADER}\n");
    for r in &sorted {
        out.push_str(&r.display_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub json: PathBuf,
    pub curves: Vec<PathBuf>,
}

fn safe_file_name(model: &str) -> String {
    model
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `table.csv` (rounded), `reports.json` (full precision) and one
/// `pr/<model>.csv` per report. Models without a curve get their operating point.
pub fn emit_report(
    dir: &Path,
    reports: &[EvalReport],
    curves: &BTreeMap<String, Vec<PrPoint>>,
) -> io::Result<ReportFiles> {
    fs::create_dir_all(dir.join("pr"))?;
    let table = dir.join("table.csv");
    fs::write(&table, render_table(reports))?;

    let mut sorted = reports.to_vec();
    sort_reports(&mut sorted);
    let json = dir.join("reports.json");
    fs::write(
        &json,
        serde_json::to_string_pretty(&sorted).map_err(io::Error::other)? + "\n",
    )?;

    let mut written = Vec::new();
    for r in &sorted {
        let path = dir.join("pr").join(format!("{}.csv", safe_file_name(&r.model)));
        let mut text = String::from("precision,recall\n");
        match curves.get(&r.model) {
            Some(points) if !points.is_empty() => {
                for p in points {
                    text.push_str(&format!("{},{}\n", p.precision, p.recall));
                }
            }
            _ => text.push_str(&format!("{},{}\n", r.precision, r.recall)),
        }
        fs::write(&path, text)?;
        written.push(path);
    }
    Ok(ReportFiles {
        table,
        json,
        curves: written,
    })
}

/// Batch AUROC over many independent instances.
pub fn auroc_many(instances: &[(Vec<u8>, Vec<f64>)]) -> Vec<Result<f64, EvalError>> {
    par::map(instances, |(y, s)| auroc(y, s))
}
