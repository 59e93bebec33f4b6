//! Context-free shallow baselines over comment count vectors.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::SparseCounts;
use crate::{par, REMOVE};

#[derive(Debug, Error, PartialEq)]
pub enum ShallowError {
    #[error("training needs both classes (got {positives} positive of {total})")]
    SingleClass { positives: usize, total: usize },
    #[error("{vectors} vectors but {labels} labels")]
    LengthMismatch { vectors: usize, labels: usize },
    #[error("vector has dimension {got}, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
    #[error("model file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShallowKind {
    MultinomialNaiveBayes,
    LogisticRegression,
}

impl ShallowKind {
    pub const ALL: [ShallowKind; 2] = [ShallowKind::MultinomialNaiveBayes, ShallowKind::LogisticRegression];

    pub fn as_str(self) -> &'static str {
        match self {
            ShallowKind::MultinomialNaiveBayes => "multinomial_naive_bayes",
            ShallowKind::LogisticRegression => "logistic_regression",
        }
    }

    /// Row name used in evaluation reports.
    pub fn report_name(self) -> &'static str {
        match self {
            ShallowKind::MultinomialNaiveBayes => "naive_bayes",
            ShallowKind::LogisticRegression => "logistic_regression",
        }
    }
}

impl fmt::Display for ShallowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShallowHyper {
    /// Additive smoothing for naive Bayes.
    pub nb_alpha: f64,
    /// Inverse L2 strength for logistic regression.
    pub lr_c: f64,
    /// Stop when the largest gradient component falls below this.
    pub lr_tol: f64,
    pub lr_max_iter: usize,
}

impl Default for ShallowHyper {
    fn default() -> Self {
        Self {
            nb_alpha: 1.0,
            lr_c: 1.0,
            lr_tol: 1e-4,
            lr_max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayes {
    pub alpha: f64,
    /// Log class priors, indexed by label.
    pub log_prior: [f64; 2],
    /// Per-class smoothed log token likelihoods.
    pub log_lik: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub c: f64,
    pub tol: f64,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ShallowModel {
    NaiveBayes(NaiveBayes),
    Logistic(LogisticRegression),
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn check_training(vectors: &[SparseCounts], labels: &[u8]) -> Result<usize, ShallowError> {
    if vectors.len() != labels.len() {
        return Err(ShallowError::LengthMismatch {
            vectors: vectors.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&y| y == REMOVE).count();
    if positives == 0 || positives == labels.len() {
        return Err(ShallowError::SingleClass {
            positives,
            total: labels.len(),
        });
    }
    let dim = vectors[0].dim;
    if let Some(v) = vectors.iter().find(|v| v.dim != dim) {
        return Err(ShallowError::Dimension {
            expected: dim,
            got: v.dim,
        });
    }
    Ok(dim)
}

pub fn train_shallow(
    kind: ShallowKind,
    vectors: &[SparseCounts],
    labels: &[u8],
    hyper: &ShallowHyper,
) -> Result<ShallowModel, ShallowError> {
    let dim = check_training(vectors, labels)?;
    match kind {
        ShallowKind::MultinomialNaiveBayes => {
            if hyper.nb_alpha <= 0.0 {
                return Err(ShallowError::Hyper(format!("nb_alpha = {}", hyper.nb_alpha)));
            }
            Ok(ShallowModel::NaiveBayes(fit_naive_bayes(
                dim,
                vectors,
                labels,
                hyper.nb_alpha,
            )))
        }
        ShallowKind::LogisticRegression => {
            if hyper.lr_c <= 0.0 || hyper.lr_tol <= 0.0 {
                return Err(ShallowError::Hyper(format!(
                    "lr_c = {}, lr_tol = {}",
                    hyper.lr_c, hyper.lr_tol
                )));
            }
            Ok(ShallowModel::Logistic(fit_logistic(dim, vectors, labels, hyper)))
        }
    }
}

fn fit_naive_bayes(dim: usize, vectors: &[SparseCounts], labels: &[u8], alpha: f64) -> NaiveBayes {
    let mut docs = [0usize; 2];
    let mut counts = [vec![0.0f64; dim], vec![0.0f64; dim]];
    for (v, &y) in vectors.iter().zip(labels) {
        let k = (y == REMOVE) as usize;
        docs[k] += 1;
        for &(i, c) in &v.entries {
            counts[k][i] += c as f64;
        }
    }
    let n = labels.len() as f64;
    let log_lik = counts.map(|row| {
        let total: f64 = row.iter().sum::<f64>() + alpha * dim as f64;
        row.iter().map(|&c| ((c + alpha) / total).ln()).collect()
    });
    NaiveBayes {
        alpha,
        log_prior: [(docs[0] as f64 / n).ln(), (docs[1] as f64 / n).ln()],
        log_lik,
    }
}

impl NaiveBayes {
    /// Log joint `log P(class) + Σ count · log P(token | class)` per class.
    pub fn log_joint(&self, v: &SparseCounts) -> [f64; 2] {
        let mut j = self.log_prior;
        for &(i, c) in &v.entries {
            j[0] += c as f64 * self.log_lik[0][i];
            j[1] += c as f64 * self.log_lik[1][i];
        }
        j
    }
}

/// Penalized negative log-likelihood `‖w‖²/(2C) + Σ logloss` and its gradient.
/// The last coordinate of `x` is the unpenalized bias.
fn logistic_objective(x: &[f64], vectors: &[SparseCounts], labels: &[u8], c: f64) -> (f64, Vec<f64>) {
    let dim = x.len() - 1;
    let (w, b) = (&x[..dim], x[dim]);
    let idx: Vec<usize> = (0..vectors.len()).collect();
    let parts = par::map_chunks(&idx, 512, |chunk| {
        let mut loss = 0.0;
        let mut grad = vec![0.0; dim + 1];
        for &n in chunk {
            let v = &vectors[n];
            let z = b + v.entries.iter().map(|&(i, c)| w[i] * c as f64).sum::<f64>();
            let y = (labels[n] == REMOVE) as u8 as f64;
            loss += softplus(z) - y * z;
            let r = sigmoid(z) - y;
            for &(i, c) in &v.entries {
                grad[i] += r * c as f64;
            }
            grad[dim] += r;
        }
        (loss, grad)
    });
    let mut loss = 0.5 / c * w.iter().map(|v| v * v).sum::<f64>();
    let mut grad: Vec<f64> = w.iter().map(|v| v / c).chain([0.0]).collect();
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    (loss, grad)
}

fn fit_logistic(dim: usize, vectors: &[SparseCounts], labels: &[u8], hyper: &ShallowHyper) -> LogisticRegression {
    let objective = |x: &[f64]| logistic_objective(x, vectors, labels, hyper.lr_c);
    let result = lbfgs(objective, vec![0.0; dim + 1], hyper.lr_tol, hyper.lr_max_iter, 10);
    let mut x = result.x;
    let bias = x.pop().unwrap_or(0.0);
    LogisticRegression {
        c: hyper.lr_c,
        tol: hyper.lr_tol,
        weights: x,
        bias,
        iterations: result.iterations,
        converged: result.converged,
    }
}

pub(crate) struct LbfgsResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Limited-memory BFGS with a backtracking Armijo line search.
pub(crate) fn lbfgs<F>(f: F, x0: Vec<f64>, tol: f64, max_iter: usize, memory: usize) -> LbfgsResult
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::with_capacity(memory);
    for iter in 0..max_iter {
        if max_abs(&g) <= tol {
            return LbfgsResult {
                x,
                iterations: iter,
                converged: true,
            };
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = history
            .last()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or_else(|| 1.0 / max_abs(&g).max(1.0));
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            // not a descent direction; restart from steepest descent
            history.clear();
            dir = g.iter().map(|v| -v / max_abs(&g).max(1.0)).collect();
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (fc, gc) = f(&cand);
            if fc <= fx + 1e-4 * step * slope {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            return LbfgsResult {
                x,
                iterations: iter + 1,
                converged: max_abs(&g) <= tol,
            };
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if history.len() == memory {
                history.remove(0);
            }
            history.push((s, y, 1.0 / sy));
        }
        x = xn;
        fx = fn_;
        g = gn;
    }
    let converged = max_abs(&g) <= tol;
    LbfgsResult {
        x,
        iterations: max_iter,
        converged,
    }
}

impl ShallowModel {
    pub fn kind(&self) -> ShallowKind {
        match self {
            ShallowModel::NaiveBayes(_) => ShallowKind::MultinomialNaiveBayes,
            ShallowModel::Logistic(_) => ShallowKind::LogisticRegression,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ShallowModel::NaiveBayes(m) => m.log_lik[0].len(),
            ShallowModel::Logistic(m) => m.weights.len(),
        }
    }

    /// Probability of the remove class.
    pub fn predict_proba(&self, v: &SparseCounts) -> Result<f64, ShallowError> {
        if v.dim != self.dim() || v.entries.iter().any(|&(i, _)| i >= self.dim()) {
            return Err(ShallowError::Dimension {
                expected: self.dim(),
                got: v.dim,
            });
        }
        Ok(match self {
            ShallowModel::NaiveBayes(m) => {
                let j = m.log_joint(v);
                sigmoid(j[1] - j[0])
            }
            ShallowModel::Logistic(m) => {
                sigmoid(m.bias + v.entries.iter().map(|&(i, c)| m.weights[i] * c as f64).sum::<f64>())
            }
        })
    }

    pub fn predict(&self, v: &SparseCounts) -> Result<u8, ShallowError> {
        Ok((self.predict_proba(v)? >= 0.5) as u8)
    }

    pub fn predict_batch(&self, vs: &[SparseCounts]) -> Result<Vec<f64>, ShallowError> {
        par::map(vs, |v| self.predict_proba(v)).into_iter().collect()
    }

    /// Flat parameter file: a `#key=value,...` header, then one row per token column.
    pub fn export(&self) -> String {
        let mut out = String::new();
        match self {
            ShallowModel::NaiveBayes(m) => {
                out.push_str(&format!("#kind={},dim={},alpha={}\n", self.kind(), self.dim(), m.alpha));
                out.push_str(&format!("prior,{},{}\n", m.log_prior[0], m.log_prior[1]));
                for i in 0..self.dim() {
                    out.push_str(&format!("{i},{},{}\n", m.log_lik[0][i], m.log_lik[1][i]));
                }
            }
            ShallowModel::Logistic(m) => {
                out.push_str(&format!(
                    "#kind={},dim={},c={},tol={},iterations={},converged={}\n",
                    self.kind(),
                    self.dim(),
                    m.c,
                    m.tol,
                    m.iterations,
                    m.converged
                ));
                out.push_str(&format!("bias,{}\n", m.bias));
                for (i, w) in m.weights.iter().enumerate() {
                    out.push_str(&format!("{i},{w}\n"));
                }
            }
        }
        out
    }

    pub fn import(text: &str) -> Result<Self, ShallowError> {
        let bad = |s: &str| ShallowError::Format(s.to_string());
        let mut lines = text.lines();
        let header: HashMap<&str, &str> = lines
            .next()
            .and_then(|h| h.strip_prefix('#'))
            .ok_or_else(|| bad("missing header"))?
            .split(',')
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let get = |k: &str| header.get(k).copied().ok_or_else(|| bad(&format!("header lacks {k}")));
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number {s:?}")));
        let dim: usize = get("dim")?.parse().map_err(|_| bad("bad dim"))?;
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        if rows.len() != dim + 1 {
            return Err(bad("row count does not match dim"));
        }
        match get("kind")? {
            "multinomial_naive_bayes" => {
                let p = &rows[0];
                if p.len() != 3 || p[0] != "prior" {
                    return Err(bad("expected prior row"));
                }
                let mut log_lik = [Vec::with_capacity(dim), Vec::with_capacity(dim)];
                for r in &rows[1..] {
                    if r.len() != 3 {
                        return Err(bad("expected index,loglik0,loglik1"));
                    }
                    log_lik[0].push(num(r[1])?);
                    log_lik[1].push(num(r[2])?);
                }
                Ok(ShallowModel::NaiveBayes(NaiveBayes {
                    alpha: num(get("alpha")?)?,
                    log_prior: [num(p[1])?, num(p[2])?],
                    log_lik,
                }))
            }
            "logistic_regression" => {
                let b = &rows[0];
                if b.len() != 2 || b[0] != "bias" {
                    return Err(bad("expected bias row"));
                }
                let weights = rows[1..]
                    .iter()
                    .map(|r| {
                        if r.len() == 2 {
                            num(r[1])
                        } else {
                            Err(bad("expected index,weight"))
                        }
                    })
                    .collect::<Result<_, _>>()?;
                Ok(ShallowModel::Logistic(LogisticRegression {
                    c: num(get("c")?)?,
                    tol: num(get("tol")?)?,
                    weights,
                    bias: num(b[1])?,
                    iterations: get("iterations")?.parse().map_err(|_| bad("iterations"))?,
                    converged: get("converged")? == "true",
                }))
            }
            other => Err(bad(&format!("unknown kind {other}"))),
        }
    }
}
