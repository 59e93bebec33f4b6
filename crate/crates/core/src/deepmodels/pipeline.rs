use std::collections::BTreeSet;

use super::{build_model, ArchConfig, DeepError, EmbeddingTable, EncodedExample, ModelSpec, Network};
use crate::corpus::{LabeledExample, Partition, SplitPlan};
use crate::features::{online_ratio, HistoryIndex, RatioConfig};
use crate::textprep::{PrepConfig, TokenSequence};

/// Encoded train/val/test rows for one model, with test post ids in order.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<EncodedExample>,
    pub val: Vec<EncodedExample>,
    pub test: Vec<EncodedExample>,
    pub test_ids: Vec<i64>,
}

/// Everything a model needs besides its weights.
pub struct PrepareInputs<'a> {
    pub examples: &'a [LabeledExample],
    pub plan: &'a SplitPlan,
    pub history: &'a HistoryIndex,
    pub prep: &'a PrepConfig,
    pub default_ratio: f64,
}

/// Ratio input for `ex` under `spec`, if the model takes one.
pub fn ratio_for(
    spec: &ModelSpec,
    ex: &LabeledExample,
    history: &HistoryIndex,
    default_ratio: f64,
) -> Result<Option<f64>, DeepError> {
    spec.ratio
        .mode()
        .map(|mode| {
            let cfg = RatioConfig::new(mode, default_ratio).map_err(|e| DeepError::Config(e.to_string()))?;
            Ok(online_ratio(history.get(&ex.user_id), &cfg))
        })
        .transpose()
}

fn compose_all(spec: &ModelSpec, rows: &[&LabeledExample], prep: &PrepConfig) -> Result<Vec<TokenSequence>, DeepError> {
    crate::par::map(rows, |ex| spec.compose(ex, prep)).into_iter().collect()
}

/// Composes inputs, restricts the embedding table to the training
/// vocabulary, builds a fresh network and encodes every partition.
pub fn prepare_model(
    spec: &ModelSpec,
    table: &EmbeddingTable,
    arch: &ArchConfig,
    seed: u64,
    inputs: &PrepareInputs<'_>,
) -> Result<(Network, PreparedData), DeepError> {
    let part = |p| inputs.plan.select(inputs.examples, p);
    let (train_rows, val_rows, test_rows) = (part(Partition::Train), part(Partition::Val), part(Partition::Test));
    let train_seqs = compose_all(spec, &train_rows, inputs.prep)?;
    let vocab: BTreeSet<&str> = train_seqs.iter().flat_map(|s| s.iter()).collect();
    let restricted = table.restrict(vocab);
    let net = build_model(spec, &restricted, arch, seed)?;
    let encode = |rows: &[&LabeledExample], seqs: Vec<TokenSequence>| -> Result<Vec<EncodedExample>, DeepError> {
        rows.iter()
            .zip(seqs)
            .map(|(ex, seq)| {
                let ratio = ratio_for(spec, ex, inputs.history, inputs.default_ratio)?;
                net.encode(&seq, ratio, ex.label)
            })
            .collect()
    };
    let train = encode(&train_rows, train_seqs)?;
    let val = encode(&val_rows, compose_all(spec, &val_rows, inputs.prep)?)?;
    let test = encode(&test_rows, compose_all(spec, &test_rows, inputs.prep)?)?;
    let test_ids = test_rows.iter().map(|e| e.post_id).collect();
    Ok((
        net,
        PreparedData {
            train,
            val,
            test,
            test_ids,
        },
    ))
}

/// Encodes one ad-hoc example for an already trained network.
pub fn encode_one(
    net: &Network,
    ex: &LabeledExample,
    prep: &PrepConfig,
    ratio: Option<f64>,
) -> Result<EncodedExample, DeepError> {
    let spec = net.spec()?;
    let seq = spec.compose(ex, prep)?;
    net.encode(&seq, ratio, ex.label)
}
