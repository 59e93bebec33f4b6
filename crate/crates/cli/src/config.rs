use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use modctx_core::baselines::ShallowHyper;
use modctx_core::deepmodels::{ArchConfig, ModelSpec, TrainConfig, MODEL_SPECS};
use modctx_core::evalharness::MissingPolicy;
use modctx_core::llmclient::{ApiConfig, PromptVariant};
use modctx_core::textprep::{DictionaryLemmatizer, IdentityLemmatizer, PrepConfig, StopwordList, DEFAULT_MAX_LEN};

/// Declarative run description, read from TOML. Unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Corpus store: `csv:DIR`, `sqlite:FILE`, a directory or an SQLite file.
    pub store: String,
    /// Split seed; `--seed` also overrides `train.seed`.
    pub seed: u64,
    pub out: PathBuf,
    pub split: SplitSection,
    pub prep: PrepSection,
    pub ratio: RatioSection,
    pub baselines: BaselineSection,
    pub embeddings: EmbeddingSection,
    /// Deep models to train; defaults to all nine.
    pub models: Vec<String>,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub llm: LlmSection,
    pub eval: EvalSection,
    pub serve: ServeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub val_frac: f64,
    pub test_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepSection {
    pub lemmatize: bool,
    pub remove_stopwords: bool,
    pub max_len: usize,
    /// Tab-separated `form<TAB>lemma` file; the bundled table when absent.
    pub lemma_dict: Option<PathBuf>,
    /// One stopword per line; the bundled list when absent.
    pub stopwords: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatioSection {
    pub default_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub min_df: usize,
    pub nb_alpha: f64,
    pub lr_c: f64,
    pub lr_tol: f64,
    pub lr_max_iter: usize,
}

impl BaselineSection {
    pub fn hyper(&self) -> ShallowHyper {
        ShallowHyper {
            nb_alpha: self.nb_alpha,
            lr_c: self.lr_c,
            lr_tol: self.lr_tol,
            lr_max_iter: self.lr_max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    /// fastText text-format vectors.
    pub path: PathBuf,
    /// Seed for the sentinel rows.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Http,
    Stub,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSection {
    /// Prompt variants to run; defaults to all seven.
    pub variants: Vec<String>,
    pub transport: TransportKind,
    /// Transcript to replay when `transport = "replay"`.
    pub replay: Option<PathBuf>,
    /// Balanced sample size drawn from the test partition; 0 uses all of it.
    pub sample: usize,
    pub stub_seed: u64,
    pub api: ApiConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub missing_policy: MissingPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub addr: String,
    /// Trained deep model to serve.
    pub model: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            store: "csv:data/corpus".into(),
            seed: 42,
            out: PathBuf::from("runs/latest"),
            split: SplitSection::default(),
            prep: PrepSection::default(),
            ratio: RatioSection::default(),
            baselines: BaselineSection::default(),
            embeddings: EmbeddingSection::default(),
            models: MODEL_SPECS.iter().map(|s| s.name.to_string()).collect(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            llm: LlmSection::default(),
            eval: EvalSection::default(),
            serve: ServeSection::default(),
        }
    }
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            val_frac: 0.1,
            test_frac: 0.1,
        }
    }
}

impl Default for PrepSection {
    fn default() -> Self {
        Self {
            lemmatize: true,
            remove_stopwords: true,
            max_len: DEFAULT_MAX_LEN,
            lemma_dict: None,
            stopwords: None,
        }
    }
}

impl Default for RatioSection {
    fn default() -> Self {
        Self { default_ratio: 0.5 }
    }
}

impl Default for BaselineSection {
    fn default() -> Self {
        let h = ShallowHyper::default();
        Self {
            min_df: 2,
            nb_alpha: h.nb_alpha,
            lr_c: h.lr_c,
            lr_tol: h.lr_tol,
            lr_max_iter: h.lr_max_iter,
        }
    }
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data/embeddings.vec"),
            seed: 1,
        }
    }
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            variants: PromptVariant::ALL.iter().map(|v| v.name().to_string()).collect(),
            transport: TransportKind::Http,
            replay: None,
            sample: 1000,
            stub_seed: 0,
            api: ApiConfig::default(),
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            missing_policy: MissingPolicy::Exclude,
        }
    }
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            model: "adv_LSTM_Title_Path_ratio".into(),
        }
    }
}

/// Parses TOML, reporting unknown or mistyped keys with their full path.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().trim().to_string();
        anyhow::anyhow!("invalid config key `{path}`: {msg}")
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a config file; relative data paths resolve against its directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = parse_config(&text).with_context(|| format!("in {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.rebase(base);
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Resolves relative store, embedding, dictionary and replay paths
    /// against `base`. The output directory stays relative to the caller.
    pub fn rebase(&mut self, base: &Path) {
        let store = self.store.clone();
        self.store = match store.split_once(':') {
            Some((scheme @ ("csv" | "sqlite"), rest)) => {
                format!("{scheme}:{}", resolve(base, Path::new(rest)).display())
            }
            _ => resolve(base, Path::new(&store)).display().to_string(),
        };
        self.embeddings.path = resolve(base, &self.embeddings.path);
        for p in [
            &mut self.prep.lemma_dict,
            &mut self.prep.stopwords,
            &mut self.llm.replay,
        ]
        .into_iter()
        .flatten()
        {
            *p = resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.train.validate()?;
        for m in &self.models {
            ModelSpec::from_name(m).with_context(|| "invalid config key `models`".to_string())?;
        }
        for v in &self.llm.variants {
            PromptVariant::from_name(v).with_context(|| "invalid config key `llm.variants`".to_string())?;
        }
        if !(0.0..=1.0).contains(&self.ratio.default_ratio) {
            bail!("invalid config key `ratio.default_ratio`: must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn prep_config(&self) -> Result<PrepConfig> {
        let mut prep = PrepConfig::default();
        prep.lemmatize = self.prep.lemmatize;
        prep.remove_stopwords = self.prep.remove_stopwords;
        prep.max_len = self.prep.max_len;
        if let Some(p) = &self.prep.lemma_dict {
            prep.lemmatizer = Arc::new(DictionaryLemmatizer::from_file(p)?);
        } else if !self.prep.lemmatize {
            prep.lemmatizer = Arc::new(IdentityLemmatizer);
        }
        if let Some(p) = &self.prep.stopwords {
            prep.stopwords = Arc::new(StopwordList::from_file(p)?);
        }
        prep.validate()?;
        Ok(prep)
    }

    pub fn model_specs(&self) -> Result<Vec<ModelSpec>> {
        Ok(self
            .models
            .iter()
            .map(|m| ModelSpec::from_name(m))
            .collect::<Result<_, _>>()?)
    }

    pub fn variants(&self) -> Result<Vec<PromptVariant>> {
        Ok(self
            .llm
            .variants
            .iter()
            .map(|v| PromptVariant::from_name(v))
            .collect::<Result<_, _>>()?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Small, fast configuration over the bundled demo corpus.
    pub fn demo(data_dir: &Path, out: &Path) -> Self {
        Self {
            store: format!("csv:{}", data_dir.display()),
            seed: 7,
            out: out.to_path_buf(),
            embeddings: EmbeddingSection {
                path: data_dir.join("embeddings.vec"),
                seed: 1,
            },
            prep: PrepSection {
                max_len: 64,
                ..PrepSection::default()
            },
            arch: ArchConfig {
                lstm_hidden: 12,
                cnn1_filters: 8,
                cnn2_filters: 8,
                cnn2_dense: 8,
                ..ArchConfig::default()
            },
            train: TrainConfig {
                epochs: 6,
                batch_size: 16,
                learning_rate: 5e-3,
                ..TrainConfig::default()
            },
            llm: LlmSection {
                transport: TransportKind::Stub,
                sample: 0,
                ..LlmSection::default()
            },
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = parse_config(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = parse_config("[train]\nlerning_rate = 0.1\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("train.lerning_rate"), "{msg}");
        let err = parse_config("[llm.api]\nmodle = \"x\"\n").unwrap_err();
        assert!(format!("{err:#}").contains("llm.api.modle"));
        let err = parse_config("sed = 3\n").unwrap_err();
        assert!(format!("{err:#}").contains("sed"));
    }

    #[test]
    fn mistyped_value_names_its_path() {
        let err = parse_config("[split]\nval_frac = \"a lot\"\n").unwrap_err();
        assert!(format!("{err:#}").contains("split.val_frac"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = parse_config("store = \"csv:corpus\"\n[embeddings]\npath = \"vec.txt\"\n").unwrap();
        cfg.rebase(Path::new("/etc/runs"));
        assert_eq!(cfg.store, "csv:/etc/runs/corpus");
        assert_eq!(cfg.embeddings.path, Path::new("/etc/runs/vec.txt"));
    }
}
