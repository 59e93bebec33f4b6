//! File layout of a run directory and the readers/writers for it.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use modctx_core::corpus::{LabeledExample, SplitPlan};
use modctx_core::features::{import_history, HistoryIndex};
use modctx_core::llmclient::{Decision, Verdict};

use crate::config::RunConfig;

pub const EXAMPLES: &str = "examples.csv";
pub const INGEST_SUMMARY: &str = "ingest.json";
pub const SPLIT_PLAN: &str = "split_plan.csv";
pub const SPLIT_SUMMARY: &str = "split.json";
pub const HISTORY: &str = "history.csv";
pub const MODELS: &str = "models";
pub const PREDICTIONS: &str = "predictions";
pub const LLM: &str = "llm";
pub const REPORTS: &str = "reports";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const RUN_INFO: &str = "run_info.txt";

/// Path of an upstream artifact, or an error naming it and its producer.
pub fn require(out: &Path, file: &str, what: &str, producer: &str) -> Result<PathBuf> {
    let p = out.join(file);
    if !p.exists() {
        bail!(
            "missing upstream artifact {} ({what}); run `modctx {producer}` first",
            p.display()
        );
    }
    Ok(p)
}

/// Writes the resolved config and provider names next to the outputs.
pub fn write_run_info(cfg: &RunConfig, command: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join(RESOLVED_CONFIG), cfg.to_toml())?;
    let prep = cfg.prep_config()?;
    let (lemmatizer, stopwords) = prep.provider_names();
    let info = format!(
        "command={command}\nseed={}\ntrain_seed={}\nsplit_rng={}\nlemmatizer={lemmatizer}\nstopwords={stopwords}\nparallel={}\nversion={}\n",
        cfg.seed,
        cfg.train.seed,
        modctx_core::corpus::SPLIT_RNG,
        modctx_core::par::PARALLEL,
        env!("CARGO_PKG_VERSION"),
    );
    fs::write(cfg.out.join(RUN_INFO), info)?;
    Ok(())
}

pub fn write_examples(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for ex in examples {
        w.serialize(ex)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_examples(out: &Path) -> Result<Vec<LabeledExample>> {
    let path = require(out, EXAMPLES, "labeled examples", "ingest")?;
    let mut r = csv::Reader::from_path(&path)?;
    r.deserialize()
        .collect::<Result<Vec<LabeledExample>, _>>()
        .with_context(|| format!("reading {}", path.display()))
}

pub fn read_plan(out: &Path) -> Result<SplitPlan> {
    let path = require(out, SPLIT_PLAN, "SplitPlan", "split")?;
    let text = fs::read_to_string(&path)?;
    SplitPlan::from_manifest(&text).with_context(|| format!("reading {}", path.display()))
}

pub fn read_history(out: &Path) -> Result<HistoryIndex> {
    let path = require(out, HISTORY, "user history index", "split")?;
    let text = fs::read_to_string(&path)?;
    import_history(&text).with_context(|| format!("reading {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityRow {
    pub post_id: i64,
    pub label: u8,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub post_id: i64,
    pub label: u8,
    pub decision: Decision,
}

/// Per-model test-set outputs as stored under `predictions/`.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Probabilities(Vec<ProbabilityRow>),
    Verdicts(Vec<VerdictRow>),
}

impl Predictions {
    pub fn labels(&self) -> Vec<u8> {
        match self {
            Predictions::Probabilities(r) => r.iter().map(|r| r.label).collect(),
            Predictions::Verdicts(r) => r.iter().map(|r| r.label).collect(),
        }
    }
}

pub fn predictions_path(out: &Path, model: &str) -> PathBuf {
    out.join(PREDICTIONS).join(format!("{model}.csv"))
}

pub fn write_probabilities(out: &Path, model: &str, rows: &[ProbabilityRow]) -> Result<()> {
    fs::create_dir_all(out.join(PREDICTIONS))?;
    let mut w = csv::Writer::from_path(predictions_path(out, model))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_verdicts(out: &Path, model: &str, post_ids: &[i64], labels: &[u8], verdicts: &[Verdict]) -> Result<()> {
    fs::create_dir_all(out.join(PREDICTIONS))?;
    let mut w = csv::Writer::from_path(predictions_path(out, model))?;
    for ((&post_id, &label), v) in post_ids.iter().zip(labels).zip(verdicts) {
        w.serialize(VerdictRow {
            post_id,
            label,
            decision: v.decision,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Predictions> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let ctx = || format!("reading {}", path.display());
    if headers.iter().any(|h| h == "probability") {
        let rows = r.deserialize().collect::<Result<_, _>>().with_context(ctx)?;
        Ok(Predictions::Probabilities(rows))
    } else if headers.iter().any(|h| h == "decision") {
        let rows = r.deserialize().collect::<Result<_, _>>().with_context(ctx)?;
        Ok(Predictions::Verdicts(rows))
    } else {
        bail!("{}: neither a probability nor a decision column", path.display())
    }
}

/// All prediction files in name order.
pub fn list_predictions(out: &Path) -> Result<Vec<(String, PathBuf)>> {
    let dir = out.join(PREDICTIONS);
    if !dir.is_dir() {
        bail!(
            "missing upstream artifact {} (model predictions); run `modctx train` and/or `modctx llm` first",
            dir.display()
        );
    }
    let mut files: Vec<(String, PathBuf)> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_string(), p.clone())))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(
            "missing upstream artifact: {} holds no prediction files; run `modctx train` and/or `modctx llm` first",
            dir.display()
        );
    }
    Ok(files)
}
