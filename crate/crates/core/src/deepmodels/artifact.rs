use std::fs;
use std::path::Path;

use super::{DeepError, Network, TrainedModel, NONDETERMINISM_CAVEATS};
use crate::textprep::PrepConfig;

pub const WEIGHTS_FILE: &str = "network.json";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Ordered `key=value` record stored next to trained weights.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ArtifactManifest {
    entries: Vec<(String, String)>,
}

impl ArtifactManifest {
    /// Seeds, configs, preprocessing providers and caveats of a training run.
    pub fn for_model(model: &TrainedModel, prep: &PrepConfig, embedding_source: &str) -> Self {
        let net = &model.network;
        let (lemmatizer, stopwords) = prep.provider_names();
        let mut m = Self::default();
        m.insert("model", net.spec_name());
        m.insert("architecture", format!("{:?}", net.architecture()));
        m.insert("seed", model.config.seed);
        m.insert(
            "train_config",
            serde_json::to_string(&model.config).expect("config serializes"),
        );
        m.insert(
            "arch_config",
            serde_json::to_string(&net.arch).expect("config serializes"),
        );
        m.insert("lemmatize", prep.lemmatize);
        m.insert("lemmatizer", lemmatizer);
        m.insert("remove_stopwords", prep.remove_stopwords);
        m.insert("stopwords", stopwords);
        m.insert("max_len", prep.max_len);
        m.insert("embedding_source", embedding_source);
        m.insert("embedding_dim", net.embedding_table().dim());
        m.insert("embedding_rows", net.embedding_table().rows());
        m.insert("parameters", net.parameter_count());
        m.insert("epochs_run", model.history.len());
        m.insert("best_epoch", model.best_epoch);
        m.insert("stopped_early", model.stopped_early);
        m.insert("parallel", crate::par::PARALLEL);
        m.insert("nondeterminism", NONDETERMINISM_CAVEATS);
        m
    }

    /// Sets `key`, replacing an earlier value.
    pub fn insert(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string().replace('\n', " ");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self, DeepError> {
        let mut m = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DeepError::Artifact(format!("manifest line {}: missing `=`", i + 1)))?;
            m.insert(k.trim(), v);
        }
        Ok(m)
    }
}

pub fn save_artifact(dir: &Path, network: &Network, manifest: &ArtifactManifest) -> Result<(), DeepError> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string(network).map_err(|e| DeepError::Artifact(e.to_string()))?;
    fs::write(dir.join(WEIGHTS_FILE), json)?;
    fs::write(dir.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(())
}

pub fn load_artifact(dir: &Path) -> Result<(Network, ArtifactManifest), DeepError> {
    let weights = dir.join(WEIGHTS_FILE);
    let text = fs::read_to_string(&weights).map_err(|e| DeepError::Artifact(format!("{}: {e}", weights.display())))?;
    let mut net: Network =
        serde_json::from_str(&text).map_err(|e| DeepError::Artifact(format!("{}: {e}", weights.display())))?;
    net.table.rebuild_index();
    net.spec()?;
    if net.emb.len() != net.table.raw().len() {
        return Err(DeepError::Artifact("embedding matrix does not match vocabulary".into()));
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = match fs::read_to_string(&manifest_path) {
        Ok(t) => ArtifactManifest::parse(&t)?,
        Err(e) => return Err(DeepError::Artifact(format!("{}: {e}", manifest_path.display()))),
    };
    Ok((net, manifest))
}
