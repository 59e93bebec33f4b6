use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use modctx_core::baselines::{train_shallow, ShallowKind};
use modctx_core::corpus::{balance_and_split, load_corpus, make_examples, write_csv_dir, LabeledExample, Partition};
use modctx_core::deepmodels::{
    prepare_model, save_artifact, train_model, ArtifactManifest, EmbeddingTable, PrepareInputs,
};
use modctx_core::evalharness::{
    emit_report, evaluate_run, precision_recall_curve, render_table, EvalReport, RunOutputs,
};
use modctx_core::features::{
    export_history, fit_count_vocabulary, history_from_plan, online_ratio, transform_counts, RatioConfig, RatioMode,
};
use modctx_core::llmclient::{
    classify_batch, read_transcript, write_transcript, HttpTransport, PromptContext, PromptVariant, ReplayTransport,
    StubTransport, Transport, Verdict, FORUM_RULES_SHORT,
};
use modctx_core::synth::{generate_corpus, generate_embeddings, SynthConfig};
use modctx_core::textprep::pipeline;

use crate::artifacts::{self, *};
use crate::config::{RunConfig, TransportKind};

pub fn ingest(cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(&cfg.store).with_context(|| format!("loading corpus from {}", cfg.store))?;
    let merged = make_examples(&corpus.articles, &corpus.posts);
    write_run_info(cfg, "ingest")?;
    write_examples(&cfg.out.join(EXAMPLES), &merged.examples)?;
    let counts = corpus.counts();
    let summary = json!({
        "store": cfg.store,
        "counts": counts,
        "examples": merged.examples.len(),
        "dropped_without_text": merged.dropped,
    });
    fs::write(
        cfg.out.join(INGEST_SUMMARY),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    println!(
        "ingested {} posts ({} online, {} deleted) from {} articles; {} examples, {} dropped without text",
        counts.posts,
        counts.online,
        counts.deleted,
        counts.articles,
        merged.examples.len(),
        merged.dropped.len()
    );
    Ok(())
}

pub fn split(cfg: &RunConfig) -> Result<()> {
    let examples = read_examples(&cfg.out)?;
    let plan = balance_and_split(&examples, cfg.split.val_frac, cfg.split.test_frac, cfg.seed)?;
    let history = history_from_plan(&plan, &examples)?;
    write_run_info(cfg, "split")?;
    fs::write(cfg.out.join(SPLIT_PLAN), plan.to_manifest())?;
    fs::write(cfg.out.join(HISTORY), export_history(&history))?;
    let by_class = |part: Partition| {
        let rows = plan.select(&examples, part);
        let removed = rows.iter().filter(|e| e.label == modctx_core::REMOVE).count();
        json!({"total": rows.len(), "keep": rows.len() - removed, "remove": removed})
    };
    let summary = json!({
        "seed": plan.seed,
        "rng": plan.rng,
        "val_frac": plan.val_frac,
        "test_frac": plan.test_frac,
        "train": by_class(Partition::Train),
        "val": by_class(Partition::Val),
        "test": by_class(Partition::Test),
        "ds_pool": plan.ds_pool.len(),
        "users_with_history": history.len(),
    });
    fs::write(
        cfg.out.join(SPLIT_SUMMARY),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    println!(
        "balanced set {} ({} train / {} val / {} test), downsample pool {}",
        plan.retained_len(),
        plan.train.len(),
        plan.val.len(),
        plan.test.len(),
        plan.ds_pool.len()
    );
    Ok(())
}

fn test_rows<'a>(examples: &'a [LabeledExample], plan: &modctx_core::corpus::SplitPlan) -> Vec<&'a LabeledExample> {
    plan.select(examples, Partition::Test)
}

fn train_baselines(
    cfg: &RunConfig,
    examples: &[LabeledExample],
    plan: &modctx_core::corpus::SplitPlan,
    only: Option<&str>,
) -> Result<()> {
    let kinds: Vec<ShallowKind> = ShallowKind::ALL
        .into_iter()
        .filter(|k| only.is_none_or(|m| m.eq_ignore_ascii_case(k.report_name())))
        .collect();
    if kinds.is_empty() {
        return Ok(());
    }
    let prep = cfg.prep_config()?;
    let tokenize = |rows: &[&LabeledExample]| -> Result<Vec<Vec<String>>> {
        rows.iter()
            .map(|e| pipeline(&e.comment, &prep).map_err(|err| err.with_text_id(e.post_id).into()))
            .collect()
    };
    let train = plan.select(examples, Partition::Train);
    let test = test_rows(examples, plan);
    let train_docs = tokenize(&train)?;
    let vocab = fit_count_vocabulary(&train_docs, cfg.baselines.min_df)?;
    let train_x: Vec<_> = train_docs.iter().map(|d| transform_counts(&vocab, d)).collect();
    let train_y: Vec<u8> = train.iter().map(|e| e.label).collect();
    let test_x: Vec<_> = tokenize(&test)?.iter().map(|d| transform_counts(&vocab, d)).collect();
    for kind in kinds {
        let model = train_shallow(kind, &train_x, &train_y, &cfg.baselines.hyper())?;
        let dir = cfg.out.join(MODELS).join(kind.report_name());
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("model.txt"), model.export())?;
        fs::write(dir.join("vocabulary.csv"), vocab.export())?;
        let probs = model.predict_batch(&test_x)?;
        let rows: Vec<ProbabilityRow> = test
            .iter()
            .zip(probs)
            .map(|(e, p)| ProbabilityRow {
                post_id: e.post_id,
                label: e.label,
                probability: p,
            })
            .collect();
        write_probabilities(&cfg.out, kind.report_name(), &rows)?;
        println!(
            "trained {} on {} rows, vocabulary {}",
            kind.report_name(),
            train.len(),
            vocab.len()
        );
    }
    Ok(())
}

fn load_embeddings(cfg: &RunConfig) -> Result<EmbeddingTable> {
    let path = &cfg.embeddings.path;
    if !path.exists() {
        bail!(
            "missing embeddings {} (set `embeddings.path` to a fastText text-format file)",
            path.display()
        );
    }
    EmbeddingTable::load(path, cfg.embeddings.seed).with_context(|| format!("loading {}", path.display()))
}

pub fn train(cfg: &RunConfig, only: Option<&str>) -> Result<()> {
    let examples = read_examples(&cfg.out)?;
    let plan = read_plan(&cfg.out)?;
    let history = read_history(&cfg.out)?;
    let baseline_names: Vec<&str> = ShallowKind::ALL.iter().map(|k| k.report_name()).collect();
    let mut specs = cfg.model_specs()?;
    if let Some(m) = only {
        let is_baseline = baseline_names.iter().any(|b| b.eq_ignore_ascii_case(m));
        specs.retain(|s| s.name.eq_ignore_ascii_case(m));
        if specs.is_empty() && !is_baseline {
            bail!(
                "--model {m} is neither a configured deep model nor a baseline ({})",
                baseline_names.join(", ")
            );
        }
    }
    write_run_info(cfg, "train")?;
    train_baselines(cfg, &examples, &plan, only)?;
    if specs.is_empty() {
        return Ok(());
    }
    let table = load_embeddings(cfg)?;
    let prep = cfg.prep_config()?;
    let inputs = PrepareInputs {
        examples: &examples,
        plan: &plan,
        history: &history,
        prep: &prep,
        default_ratio: cfg.ratio.default_ratio,
    };
    for spec in specs {
        let (net, data) = prepare_model(&spec, &table, &cfg.arch, cfg.train.seed, &inputs)?;
        let trained = train_model(net, &cfg.train, &data.train, &data.val)?;
        let probs = trained.network.predict_batch(&data.test)?;
        let rows: Vec<ProbabilityRow> = data
            .test_ids
            .iter()
            .zip(&data.test)
            .zip(probs)
            .map(|((&post_id, ex), p)| ProbabilityRow {
                post_id,
                label: ex.label,
                probability: p,
            })
            .collect();
        let dir = cfg.out.join(MODELS).join(spec.name);
        let mut manifest = ArtifactManifest::for_model(&trained, &prep, &cfg.embeddings.path.display().to_string());
        manifest.insert("split_seed", plan.seed);
        manifest.insert("ratio_mode", format!("{:?}", spec.ratio).to_lowercase());
        manifest.insert("default_ratio", cfg.ratio.default_ratio);
        save_artifact(&dir, &trained.network, &manifest)?;
        let mut epochs = String::from("epoch,train_loss,val_loss,val_accuracy\n");
        for h in &trained.history {
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            epochs.push_str(&format!(
                "{},{},{},{}\n",
                h.epoch,
                h.train_loss,
                opt(h.val_loss),
                opt(h.val_accuracy)
            ));
        }
        fs::write(dir.join("epochs.csv"), epochs)?;
        write_probabilities(&cfg.out, spec.name, &rows)?;
        println!(
            "trained {} ({} parameters), best epoch {} of {}",
            spec.name,
            trained.network.parameter_count(),
            trained.best_epoch,
            trained.history.len()
        );
    }
    Ok(())
}

/// Balanced sample of the test partition: `n / 2` rows per class, or all rows when `n` is 0.
fn llm_sample(rows: Vec<&LabeledExample>, n: usize, seed: u64) -> Vec<&LabeledExample> {
    if n == 0 || n >= rows.len() {
        return rows;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(n);
    for label in [modctx_core::KEEP, modctx_core::REMOVE] {
        let mut class: Vec<&LabeledExample> = rows.iter().copied().filter(|e| e.label == label).collect();
        rand::seq::SliceRandom::shuffle(class.as_mut_slice(), &mut rng);
        picked.extend(class.into_iter().take(n / 2));
    }
    picked.sort_by_key(|e| e.post_id);
    picked
}

fn transport_for(cfg: &RunConfig, variant: PromptVariant, replay: Option<&Path>) -> Result<Box<dyn Transport>> {
    let replay = replay.map(Path::to_path_buf).or_else(|| {
        (cfg.llm.transport == TransportKind::Replay)
            .then(|| cfg.llm.replay.clone())
            .flatten()
    });
    if let Some(path) = replay {
        let file = if path.is_dir() {
            path.join(variant.name()).join("transcript.jsonl")
        } else {
            path
        };
        let records: Vec<_> = read_transcript(&file)?
            .into_iter()
            .filter(|r| r.variant == variant.name())
            .collect();
        if records.is_empty() {
            bail!("transcript {} has no records for {}", file.display(), variant.name());
        }
        return Ok(Box::new(ReplayTransport::new(records)));
    }
    match cfg.llm.transport {
        TransportKind::Http => Ok(Box::new(HttpTransport::new(&cfg.llm.api))),
        TransportKind::Stub => Ok(Box::new(StubTransport {
            seed: cfg.llm.stub_seed,
        })),
        TransportKind::Replay => bail!("invalid config key `llm.replay`: required when `llm.transport = \"replay\"`"),
    }
}

pub fn llm(cfg: &RunConfig, only: Option<&str>, replay: Option<&Path>) -> Result<()> {
    let examples = read_examples(&cfg.out)?;
    let plan = read_plan(&cfg.out)?;
    let history = read_history(&cfg.out)?;
    let mut variants = cfg.variants()?;
    if let Some(v) = only {
        variants = vec![PromptVariant::from_name(v)?];
    }
    write_run_info(cfg, "llm")?;
    let rows = llm_sample(test_rows(&examples, &plan), cfg.llm.sample, cfg.seed);
    let ratio_cfg = RatioConfig::new(RatioMode::Full, cfg.ratio.default_ratio)?;
    let contexts: Vec<PromptContext> = rows
        .iter()
        .map(|e| PromptContext {
            comment: e.comment.clone(),
            title: Some(e.title.clone()),
            path: Some(e.path.clone()),
            ratio: Some(online_ratio(history.get(&e.user_id), &ratio_cfg)),
            rules: Some(FORUM_RULES_SHORT.to_string()),
        })
        .collect();
    let post_ids: Vec<i64> = rows.iter().map(|e| e.post_id).collect();
    let labels: Vec<u8> = rows.iter().map(|e| e.label).collect();
    for variant in variants {
        let transport = transport_for(cfg, variant, replay)?;
        let dir = cfg.out.join(artifacts::LLM).join(variant.name());
        fs::create_dir_all(&dir)?;
        let transcript = dir.join("transcript.jsonl");
        let run = classify_batch(&contexts, variant, &cfg.llm.api, transport.as_ref(), Some(&transcript))?;
        write_transcript(&transcript, &run.transcript)?;
        fs::write(dir.join("run_log.json"), serde_json::to_string_pretty(&run.log)? + "\n")?;
        write_verdicts(&cfg.out, variant.name(), &post_ids, &labels, &run.verdicts)?;
        println!(
            "{}: {} requests via {}, {} missing answers, {} retries",
            variant.name(),
            run.log.n_requests,
            run.log.transport,
            run.log.missing_answers,
            run.log.retries
        );
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    let files = list_predictions(&cfg.out)?;
    let mut reports = Vec::new();
    let mut curves = BTreeMap::new();
    for (model, path) in files {
        let preds = read_predictions(&path)?;
        let labels = preds.labels();
        let report = match &preds {
            Predictions::Probabilities(rows) => {
                let p: Vec<f64> = rows.iter().map(|r| r.probability).collect();
                curves.insert(model.clone(), precision_recall_curve(&labels, &p)?);
                evaluate_run(&model, &labels, RunOutputs::Probabilities(&p), cfg.eval.missing_policy)?
            }
            Predictions::Verdicts(rows) => {
                let v: Vec<Verdict> = rows
                    .iter()
                    .map(|r| Verdict {
                        decision: r.decision,
                        raw_response: String::new(),
                        strength: None,
                        explanation: None,
                    })
                    .collect();
                evaluate_run(&model, &labels, RunOutputs::Verdicts(&v), cfg.eval.missing_policy)?
            }
        };
        reports.push(report);
    }
    write_run_info(cfg, "eval")?;
    emit_report(&cfg.out.join(REPORTS), &reports, &curves)?;
    print!("{}", render_table(&reports));
    Ok(reports)
}

pub fn report(cfg: &RunConfig) -> Result<String> {
    let path = require(
        &cfg.out,
        &format!("{REPORTS}/reports.json"),
        "evaluation reports",
        "eval",
    )?;
    let reports: Vec<EvalReport> =
        serde_json::from_str(&fs::read_to_string(&path)?).with_context(|| format!("reading {}", path.display()))?;
    let table = render_table(&reports);
    print!("{table}");
    Ok(table)
}

/// Writes a synthetic corpus (CSV store) and matching embeddings into `dir`.
pub fn synth(dir: &Path, synth: &SynthConfig, dim: usize) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let corpus = generate_corpus(synth);
    write_csv_dir(&corpus, dir)?;
    let vec_path = dir.join("embeddings.vec");
    fs::write(&vec_path, generate_embeddings(synth.seed, dim))?;
    Ok(vec_path)
}

pub const DEMO_EMBEDDING_DIM: usize = 16;

/// Materializes the demo corpus under `out/data` and returns its config.
pub fn demo_config(out: &Path) -> Result<RunConfig> {
    let data = out.join("data");
    synth(&data, &SynthConfig::demo(), DEMO_EMBEDDING_DIM)?;
    Ok(RunConfig::demo(&data, out))
}

/// ingest → split → train → llm → eval.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    ingest(cfg)?;
    split(cfg)?;
    train(cfg, None)?;
    llm(cfg, None, None)?;
    eval(cfg)
}
