//! LSTM and CNN comment classifiers over pretrained word embeddings, with
//! sentinel-token context fusion and an optional scalar online-ratio input.
//!
//! All nine model variants share one pipeline:
//! embedding lookup → sequence encoder → pooled vector (+ ratio) → dense head
//! → probability of removal.

mod artifact;
mod embedding;
mod network;
mod pipeline;
mod train;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledExample;
use crate::features::RatioMode;
use crate::textprep::{compose_input, PrepConfig, PrepError, TokenSequence};

pub use artifact::{load_artifact, save_artifact, ArtifactManifest};
pub use embedding::EmbeddingTable;
pub use network::{build_model, EncodedExample, Network};
pub use pipeline::{encode_one, prepare_model, ratio_for, PrepareInputs, PreparedData};
pub use train::{train_model, EpochStats, TrainedModel};

#[derive(Debug, Error)]
pub enum DeepError {
    #[error("unknown model spec `{0}`")]
    UnknownSpec(String),
    #[error("embedding file line {line}: expected {expected} values, found {found}")]
    Ragged { line: usize, expected: usize, found: usize },
    #[error("embedding file line {line}: {reason}")]
    EmbeddingFormat { line: usize, reason: String },
    #[error("embedding file has no vectors")]
    NoVectors,
    #[error("input error: {0}")]
    Input(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    LstmBase,
    LstmAdvanced,
    Cnn1,
    Cnn2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputField {
    Comment,
    Title,
    Path,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioInput {
    None,
    Simple,
    Full,
}

impl RatioInput {
    pub fn mode(self) -> Option<RatioMode> {
        match self {
            RatioInput::None => None,
            RatioInput::Simple => Some(RatioMode::Simple),
            RatioInput::Full => Some(RatioMode::Full),
        }
    }
}

/// One of the nine trained deep model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub name: &'static str,
    pub architecture: Architecture,
    pub inputs: &'static [InputField],
    pub ratio: RatioInput,
}

use InputField::{Comment, Path, Title};

const C: &[InputField] = &[Comment];
const CT: &[InputField] = &[Comment, Title];
const CTP: &[InputField] = &[Comment, Title, Path];

pub const MODEL_SPECS: [ModelSpec; 9] = [
    ModelSpec {
        name: "base_LSTM",
        architecture: Architecture::LstmBase,
        inputs: C,
        ratio: RatioInput::None,
    },
    ModelSpec {
        name: "base_LSTM_title",
        architecture: Architecture::LstmBase,
        inputs: CT,
        ratio: RatioInput::None,
    },
    ModelSpec {
        name: "base_LSTM_title_path",
        architecture: Architecture::LstmBase,
        inputs: CTP,
        ratio: RatioInput::None,
    },
    ModelSpec {
        name: "adv_LSTM_Title_simple_ratio",
        architecture: Architecture::LstmAdvanced,
        inputs: CT,
        ratio: RatioInput::Simple,
    },
    ModelSpec {
        name: "adv_LSTM_Title_ratio",
        architecture: Architecture::LstmAdvanced,
        inputs: CT,
        ratio: RatioInput::Full,
    },
    ModelSpec {
        name: "adv_LSTM_Title_Path_ratio",
        architecture: Architecture::LstmAdvanced,
        inputs: CTP,
        ratio: RatioInput::Full,
    },
    ModelSpec {
        name: "adv_CNN_1_title_ratio",
        architecture: Architecture::Cnn1,
        inputs: CT,
        ratio: RatioInput::Full,
    },
    ModelSpec {
        name: "adv_CNN_2_title_ratio",
        architecture: Architecture::Cnn2,
        inputs: CT,
        ratio: RatioInput::Full,
    },
    ModelSpec {
        name: "adv_CNN_title_path_ratio",
        architecture: Architecture::Cnn1,
        inputs: CTP,
        ratio: RatioInput::Full,
    },
];

impl ModelSpec {
    /// Case-insensitive lookup (report tables spell some names differently).
    pub fn from_name(name: &str) -> Result<ModelSpec, DeepError> {
        MODEL_SPECS
            .iter()
            .find(|s| s.name.eq_ignore_ascii_case(name))
            .copied()
            .ok_or_else(|| DeepError::UnknownSpec(name.to_string()))
    }

    pub fn uses(&self, field: InputField) -> bool {
        self.inputs.contains(&field)
    }

    pub fn needs_ratio(&self) -> bool {
        self.ratio != RatioInput::None
    }

    /// Fused token sequence carrying exactly the inputs this model consumes.
    pub fn compose(&self, ex: &LabeledExample, prep: &PrepConfig) -> Result<TokenSequence, DeepError> {
        let path = self.uses(InputField::Path).then_some(ex.path.as_str());
        let title = self.uses(InputField::Title).then_some(ex.title.as_str());
        compose_input(path, title, &ex.comment, prep).map_err(|e| DeepError::Prep(e.with_text_id(ex.post_id)))
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name)
    }
}

/// Layer sizes. Every value is recorded with trained artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub lstm_hidden: usize,
    pub lstm_advanced_layers: usize,
    /// Dropout for advanced LSTM and CNN variants (between stacked layers and on the pooled vector).
    pub dropout: f64,
    pub cnn1_widths: Vec<usize>,
    pub cnn1_filters: usize,
    pub cnn2_widths: Vec<usize>,
    pub cnn2_filters: usize,
    /// Hidden units of the extra dense layer in the CNN_2 head.
    pub cnn2_dense: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            lstm_hidden: 128,
            lstm_advanced_layers: 2,
            dropout: 0.3,
            cnn1_widths: vec![3, 4, 5],
            cnn1_filters: 100,
            cnn2_widths: vec![2, 3],
            cnn2_filters: 128,
            cnn2_dense: 64,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), DeepError> {
        let bad = |m: &str| Err(DeepError::Config(m.to_string()));
        if self.lstm_hidden == 0 || self.lstm_advanced_layers == 0 {
            return bad("LSTM sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.cnn1_widths.is_empty()
            || self.cnn2_widths.is_empty()
            || self.cnn1_widths.iter().chain(&self.cnn2_widths).any(|&w| w == 0)
            || self.cnn1_filters == 0
            || self.cnn2_filters == 0
            || self.cnn2_dense == 0
        {
            return bad("CNN sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub max_len: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub fine_tune_embeddings: bool,
    /// Examples per gradient work unit; fixed so results do not depend on thread count.
    pub grad_chunk: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            batch_size: 64,
            epochs: 20,
            learning_rate: 1e-3,
            max_len: crate::textprep::DEFAULT_MAX_LEN,
            patience: 3,
            fine_tune_embeddings: true,
            grad_chunk: 8,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DeepError> {
        if self.batch_size == 0
            || self.learning_rate <= 0.0
            || self.max_len == 0
            || self.patience == 0
            || self.grad_chunk == 0
            || self.clip_norm < 0.0
        {
            return Err(DeepError::Config(format!("non-positive training setting in {self:?}")));
        }
        Ok(())
    }
}

/// Known sources of run-to-run variation, recorded in artifact manifests.
pub const NONDETERMINISM_CAVEATS: &str = "none within one build: gradients are reduced in fixed chunk order; results may differ across CPU architectures or compiler versions through floating-point libm differences";
