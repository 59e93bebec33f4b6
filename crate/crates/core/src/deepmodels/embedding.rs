use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DeepError;
use crate::textprep::SENTINELS;

/// Word vectors in row-major order.
///
/// Rows are the file's vectors in file order, then the LINK, TITEL and
/// KOMMENTAR sentinels, then the unknown-token row (mean of file vectors).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
}

impl EmbeddingTable {
    /// Reads the fastText text format: optional `count dim` header, then
    /// `token v1 … vd` lines. Sentinel rows are drawn from `seed`.
    pub fn load(path: &Path, seed: u64) -> Result<Self, DeepError> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, seed)
    }

    pub fn parse(text: &str, seed: u64) -> Result<Self, DeepError> {
        let mut dim: Option<usize> = None;
        let mut tokens = Vec::new();
        let mut vectors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(' ').filter(|f| !f.is_empty());
            let Some(token) = fields.next() else { continue };
            let values: Vec<&str> = fields.collect();
            if i == 0 && values.len() == 1 {
                if let (Ok(_), Ok(d)) = (token.parse::<usize>(), values[0].parse::<usize>()) {
                    dim = Some(d);
                    continue;
                }
            }
            let expected = *dim.get_or_insert(values.len());
            if values.len() != expected {
                return Err(DeepError::Ragged {
                    line: line_no,
                    expected,
                    found: values.len(),
                });
            }
            for v in values {
                vectors.push(v.parse::<f64>().map_err(|_| DeepError::EmbeddingFormat {
                    line: line_no,
                    reason: format!("bad number {v:?}"),
                })?);
            }
            tokens.push(token.to_string());
        }
        let dim = match dim {
            Some(d) if d > 0 && !tokens.is_empty() => d,
            _ => return Err(DeepError::NoVectors),
        };
        Ok(Self::assemble(dim, tokens, vectors, seed))
    }

    /// Builds a table from in-memory vectors (sentinel and unknown rows are added).
    pub fn from_vectors(dim: usize, rows: Vec<(String, Vec<f64>)>, seed: u64) -> Result<Self, DeepError> {
        if dim == 0 || rows.is_empty() {
            return Err(DeepError::NoVectors);
        }
        let mut tokens = Vec::with_capacity(rows.len());
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for (i, (t, v)) in rows.into_iter().enumerate() {
            if v.len() != dim {
                return Err(DeepError::Ragged {
                    line: i + 1,
                    expected: dim,
                    found: v.len(),
                });
            }
            tokens.push(t);
            vectors.extend(v);
        }
        Ok(Self::assemble(dim, tokens, vectors, seed))
    }

    fn assemble(dim: usize, mut tokens: Vec<String>, mut vectors: Vec<f64>, seed: u64) -> Self {
        let n = tokens.len();
        let mut mean = vec![0.0; dim];
        for row in vectors.chunks(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        for s in SENTINELS {
            tokens.push(s.to_string());
            vectors.extend((0..dim).map(|_| rng.gen_range(-scale..scale)));
        }
        tokens.push(UNKNOWN.to_string());
        vectors.extend(mean);
        let mut table = Self {
            dim,
            tokens,
            index: HashMap::new(),
            vectors,
        };
        table.rebuild_index();
        table
    }

    /// Indexes file tokens; lowercase aliases are added for cased entries
    /// when the lowercase form is not itself present.
    pub(crate) fn rebuild_index(&mut self) {
        let n_file = self.tokens.len() - SENTINELS.len() - 1;
        let mut index = HashMap::with_capacity(n_file);
        for (i, t) in self.tokens[..n_file].iter().enumerate() {
            index.entry(t.clone()).or_insert(i);
        }
        for (i, t) in self.tokens[..n_file].iter().enumerate() {
            let lower = t.to_lowercase();
            if lower != *t {
                index.entry(lower).or_insert(i);
            }
        }
        self.index = index;
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    /// Number of vectors read from the source file.
    pub fn file_rows(&self) -> usize {
        self.rows() - SENTINELS.len() - 1
    }

    pub fn unknown_id(&self) -> usize {
        self.rows() - 1
    }

    pub fn sentinel_id(&self, sentinel: &str) -> Option<usize> {
        SENTINELS
            .iter()
            .position(|s| *s == sentinel)
            .map(|k| self.file_rows() + k)
    }

    /// Row for `token`; sentinels map to their reserved rows, unseen tokens
    /// to the unknown row.
    pub fn lookup(&self, token: &str) -> usize {
        if let Some(id) = self.sentinel_id(token) {
            return id;
        }
        self.index.get(token).copied().unwrap_or(self.unknown_id())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.sentinel_id(token).is_some() || self.index.contains_key(token)
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.vectors[id * self.dim..(id + 1) * self.dim]
    }

    pub fn vector(&self, token: &str) -> &[f64] {
        self.row(self.lookup(token))
    }

    pub(crate) fn raw(&self) -> &[f64] {
        &self.vectors
    }

    /// Keeps only file rows for `keep` (plus sentinels and unknown row).
    /// The unknown and sentinel vectors are carried over unchanged.
    pub fn restrict<'a>(&self, keep: impl IntoIterator<Item = &'a str>) -> EmbeddingTable {
        let mut ids: Vec<usize> = keep.into_iter().filter_map(|t| self.index.get(t).copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut tokens = Vec::with_capacity(ids.len() + SENTINELS.len() + 1);
        let mut vectors = Vec::with_capacity((ids.len() + SENTINELS.len() + 1) * self.dim);
        for id in ids.into_iter().chain(self.file_rows()..self.rows()) {
            tokens.push(self.tokens[id].clone());
            vectors.extend_from_slice(self.row(id));
        }
        let mut table = EmbeddingTable {
            dim: self.dim,
            tokens,
            index: HashMap::new(),
            vectors,
        };
        table.rebuild_index();
        table
    }
}

pub(crate) const UNKNOWN: &str = "<unk>";
