//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use modctx_core::corpus::{LabeledExample, Partition, SplitPlan};
use modctx_core::evalharness::{evaluate_run, render_table, EvalReport, MissingPolicy, RunOutputs};
use modctx_core::llmclient::{
    classify_batch, ApiConfig, Decision, PromptContext, PromptVariant, ReplayTransport, FORUM_RULES_SHORT,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixtures() -> PathBuf {
    repo_root().join("fixtures")
}

pub fn test_data() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

/// Hand-counted confusion cells: (tp, fp, tn, fn) with 1 = positive.
pub fn count_cells(labels: &[u8], preds: &[u8]) -> (usize, usize, usize, usize) {
    let mut cells = (0, 0, 0, 0);
    for i in 0..labels.len() {
        match (labels[i], preds[i]) {
            (1, 1) => cells.0 += 1,
            (0, 1) => cells.1 += 1,
            (0, 0) => cells.2 += 1,
            (1, 0) => cells.3 += 1,
            _ => panic!("non-binary value"),
        }
    }
    cells
}

/// (accuracy, precision, recall, f1) from raw counts; undefined ratios are 0.
pub fn oracle_metrics(labels: &[u8], preds: &[u8]) -> (f64, f64, f64, f64) {
    let (tp, fp, tn, fn_) = count_cells(labels, preds);
    let n = (tp + fp + tn + fn_) as f64;
    let accuracy = (tp + tn) as f64 / n;
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    (accuracy, precision, recall, f1)
}

/// Share of (positive, negative) pairs ranked correctly, ties counted half.
pub fn brute_auroc(labels: &[u8], scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Random labels with both classes present and scores drawn from a small
/// grid so ties are frequent.
pub fn random_scored_instance(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<u8>, Vec<f64>) {
    loop {
        let n = rng.gen_range(2..=max_n);
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        let grid = rng.gen_range(2..=40);
        let scores = (0..n).map(|_| rng.gen_range(0..=grid) as f64 / grid as f64).collect();
        return (labels, scores);
    }
}

/// Synthetic labeled rows: `n` posts spread over `users` users.
pub fn random_examples(rng: &mut ChaCha8Rng, n: usize, users: i64, p_remove: f64) -> Vec<LabeledExample> {
    (0..n)
        .map(|i| LabeledExample {
            post_id: 10 + i as i64 * 3,
            user_id: rng.gen_range(0..users),
            comment: format!("kommentar nummer {i}"),
            title: "Titel".into(),
            path: "Newsroom/Inland".into(),
            label: u8::from(rng.gen_bool(p_remove)),
        })
        .collect()
}

/// Direct recount of a user's online ratio from the labeled rows and a plan.
pub fn recount_ratio(examples: &[LabeledExample], plan: &SplitPlan, user: i64, full: bool, default: f64) -> f64 {
    let mut online = 0u32;
    let mut total = 0u32;
    for ex in examples.iter().filter(|e| e.user_id == user) {
        let counted = match plan.partition_of(ex.post_id) {
            Some(Partition::Train) => true,
            Some(Partition::Ds) => full,
            _ => false,
        };
        if counted {
            total += 1;
            online += u32::from(ex.label == 0);
        }
    }
    if total == 0 {
        default
    } else {
        online as f64 / total as f64
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn updating_goldens() -> bool {
    std::env::var_os("UPDATE_GOLDENS").is_some()
}

/// Context used for every prompt golden file.
pub fn golden_prompt_context() -> PromptContext {
    PromptContext {
        comment: "Das ist doch alles gelogen, typisch für diese Zeitung!".into(),
        title: Some("Hitzewelle: Wien meldet neuen Temperaturrekord".into()),
        path: Some("Newsroom/Panorama/Wetter".into()),
        ratio: Some(0.625),
        rules: Some(FORUM_RULES_SHORT.into()),
    }
}

#[derive(Debug, Deserialize)]
pub struct ResponseFixture {
    pub response: String,
    pub expected: Decision,
}

pub fn response_fixtures() -> Vec<ResponseFixture> {
    let text = std::fs::read_to_string(test_data().join("llm_responses.jsonl")).unwrap();
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[derive(Debug, Deserialize)]
pub struct ReplayRow {
    pub post_id: i64,
    pub comment: String,
    pub title: String,
    pub label: u8,
}

pub const REPLAY_VARIANT: PromptVariant = PromptVariant::Title;

pub fn replay_rows() -> Vec<ReplayRow> {
    let text = std::fs::read_to_string(test_data().join("replay/contexts.jsonl")).unwrap();
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

pub fn replay_contexts(rows: &[ReplayRow]) -> Vec<PromptContext> {
    rows.iter()
        .map(|r| PromptContext {
            title: Some(r.title.clone()),
            ..PromptContext::comment(r.comment.clone())
        })
        .collect()
}

/// Runs the committed transcript through the batch runner and scores it.
pub fn replay_report() -> (EvalReport, String) {
    let rows = replay_rows();
    let transport = ReplayTransport::from_file(&test_data().join("replay/transcript.jsonl")).unwrap();
    let run = classify_batch(
        &replay_contexts(&rows),
        REPLAY_VARIANT,
        &ApiConfig::default(),
        &transport,
        None,
    )
    .unwrap();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let report = evaluate_run(
        REPLAY_VARIANT.name(),
        &labels,
        RunOutputs::Verdicts(&run.verdicts),
        MissingPolicy::Exclude,
    )
    .unwrap();
    let table = render_table(std::slice::from_ref(&report));
    (report, table)
}
