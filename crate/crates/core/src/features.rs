//! User-history online ratios and bag-of-words count vectors.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabeledExample, Partition, SplitPlan};
use crate::KEEP;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("leakage: post {post_id} belongs to the {partition} partition")]
    Leakage { post_id: i64, partition: Partition },
    #[error("post {post_id} supplied as {expected} but the plan places it in {actual:?}")]
    PartitionMismatch {
        post_id: i64,
        expected: Partition,
        actual: Option<Partition>,
    },
    #[error("downsample-pool post {0} is not labeled online")]
    DeletedInPool(i64),
    #[error("cannot fit a vocabulary on an empty corpus")]
    EmptyCorpus,
    #[error("default_ratio {0} is outside [0, 1]")]
    DefaultRatio(f64),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
}

/// Per-user comment counts in the training split and the downsample pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UserHistoryRecord {
    pub user_id: i64,
    pub c_train: u32,
    pub c_online_train: u32,
    pub c_ds: u32,
    pub c_online_ds: u32,
}

impl UserHistoryRecord {
    pub fn new(user_id: i64, c_train: u32, c_online_train: u32, c_ds: u32, c_online_ds: u32) -> Self {
        Self {
            user_id,
            c_train,
            c_online_train,
            c_ds,
            c_online_ds,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioMode {
    /// Training rows only.
    Simple,
    /// Training rows plus the downsample pool.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioConfig {
    pub mode: RatioMode,
    /// Returned for unseen users and zero denominators.
    pub default_ratio: f64,
}

impl Default for RatioConfig {
    fn default() -> Self {
        Self {
            mode: RatioMode::Full,
            default_ratio: 0.5,
        }
    }
}

impl RatioConfig {
    pub fn new(mode: RatioMode, default_ratio: f64) -> Result<Self, FeatureError> {
        let cfg = Self { mode, default_ratio };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if (0.0..=1.0).contains(&self.default_ratio) {
            Ok(())
        } else {
            Err(FeatureError::DefaultRatio(self.default_ratio))
        }
    }
}

pub type HistoryIndex = BTreeMap<i64, UserHistoryRecord>;

/// Counts each user's training and downsample-pool comments.
///
/// Every supplied example is checked against `plan`: a validation or test
/// post is a hard leakage error, and examples must sit in the partition they
/// are passed as. Pool rows must be online.
pub fn build_history_index<'a>(
    plan: &SplitPlan,
    train: impl IntoIterator<Item = &'a LabeledExample>,
    ds_pool: impl IntoIterator<Item = &'a LabeledExample>,
) -> Result<HistoryIndex, FeatureError> {
    let mut index = HistoryIndex::new();
    let mut seen = BTreeSet::new();
    for (expected, rows) in [
        (Partition::Train, train.into_iter().collect::<Vec<_>>()),
        (Partition::Ds, ds_pool.into_iter().collect()),
    ] {
        for e in rows {
            let actual = plan.partition_of(e.post_id);
            if let Some(p @ (Partition::Val | Partition::Test)) = actual {
                return Err(FeatureError::Leakage {
                    post_id: e.post_id,
                    partition: p,
                });
            }
            if actual != Some(expected) {
                return Err(FeatureError::PartitionMismatch {
                    post_id: e.post_id,
                    expected,
                    actual,
                });
            }
            if !seen.insert(e.post_id) {
                continue;
            }
            let rec = index.entry(e.user_id).or_insert(UserHistoryRecord {
                user_id: e.user_id,
                ..Default::default()
            });
            let online = (e.label == KEEP) as u32;
            match expected {
                Partition::Train => {
                    rec.c_train += 1;
                    rec.c_online_train += online;
                }
                _ => {
                    if online == 0 {
                        return Err(FeatureError::DeletedInPool(e.post_id));
                    }
                    rec.c_ds += 1;
                    rec.c_online_ds += online;
                }
            }
        }
    }
    Ok(index)
}

/// Convenience wrapper selecting the train and pool rows of `examples`.
pub fn history_from_plan(plan: &SplitPlan, examples: &[LabeledExample]) -> Result<HistoryIndex, FeatureError> {
    build_history_index(
        plan,
        plan.select(examples, Partition::Train),
        plan.select(examples, Partition::Ds),
    )
}

/// Simple ratio `c_online_train / c_train` or full ratio
/// `(c_online_train + c_online_ds) / (c_train + c_ds)`.
pub fn online_ratio(rec: Option<&UserHistoryRecord>, cfg: &RatioConfig) -> f64 {
    let Some(r) = rec else {
        return cfg.default_ratio;
    };
    let (num, den) = match cfg.mode {
        RatioMode::Simple => (r.c_online_train, r.c_train),
        RatioMode::Full => (r.c_online_train + r.c_online_ds, r.c_train + r.c_ds),
    };
    if den == 0 {
        cfg.default_ratio
    } else {
        num as f64 / den as f64
    }
}

pub fn export_history(index: &HistoryIndex) -> String {
    let mut out = String::new();
    for r in index.values() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.user_id, r.c_train, r.c_online_train, r.c_ds, r.c_online_ds
        ));
    }
    out
}

pub fn import_history(text: &str) -> Result<HistoryIndex, FeatureError> {
    let mut index = HistoryIndex::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = |reason: &str| FeatureError::Format {
            line: i + 1,
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let user_id: i64 = f[0].parse().map_err(|_| bad("bad user id"))?;
        let n: Vec<u32> = f[1..]
            .iter()
            .map(|x| x.parse().map_err(|_| bad("bad count")))
            .collect::<Result<_, _>>()?;
        if n[1] > n[0] || n[3] > n[2] {
            return Err(bad("online count exceeds total"));
        }
        index.insert(user_id, UserHistoryRecord::new(user_id, n[0], n[1], n[2], n[3]));
    }
    Ok(index)
}

/// Token → column map with dense lexicographic indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountVocabulary {
    index: BTreeMap<String, usize>,
    pub document_count: usize,
}

/// Sparse count vector: `(column, count)` pairs sorted by column.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SparseCounts {
    pub dim: usize,
    pub entries: Vec<(usize, u32)>,
}

impl SparseCounts {
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &(i, c) in &self.entries {
            v[i] = c as f64;
        }
        v
    }
}

impl CountVocabulary {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Tokens in column order.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn export(&self) -> String {
        let mut out = String::new();
        for (tok, idx) in &self.index {
            out.push_str(&format!("{tok},{idx}\n"));
        }
        out
    }

    pub fn import(text: &str, document_count: usize) -> Result<Self, FeatureError> {
        let mut index = BTreeMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = |reason: &str| FeatureError::Format {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (tok, idx) = line.rsplit_once(',').ok_or_else(|| bad("expected token,index"))?;
            let idx: usize = idx.parse().map_err(|_| bad("bad index"))?;
            index.insert(tok.to_string(), idx);
        }
        let dense = index.values().copied().collect::<BTreeSet<_>>();
        if dense.len() != index.len() || dense.iter().enumerate().any(|(i, &x)| i != x) {
            return Err(FeatureError::Format {
                line: 0,
                reason: "indices are not dense 0..|V|-1".into(),
            });
        }
        Ok(Self { index, document_count })
    }
}

/// Fits a unigram vocabulary keeping tokens with document frequency ≥ `min_df`.
pub fn fit_count_vocabulary<S: AsRef<str>>(docs: &[Vec<S>], min_df: usize) -> Result<CountVocabulary, FeatureError> {
    if docs.is_empty() {
        return Err(FeatureError::EmptyCorpus);
    }
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in docs {
        let uniq: BTreeSet<&str> = doc.iter().map(AsRef::as_ref).collect();
        for t in uniq {
            *df.entry(t).or_default() += 1;
        }
    }
    let mut kept: Vec<&str> = df.into_iter().filter(|&(_, n)| n >= min_df).map(|(t, _)| t).collect();
    kept.sort_unstable();
    Ok(CountVocabulary {
        index: kept.into_iter().enumerate().map(|(i, t)| (t.to_string(), i)).collect(),
        document_count: docs.len(),
    })
}

/// Counts in-vocabulary tokens; out-of-vocabulary tokens are ignored.
pub fn transform_counts<S: AsRef<str>>(vocab: &CountVocabulary, tokens: &[S]) -> SparseCounts {
    let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
    for t in tokens {
        if let Some(i) = vocab.get(t.as_ref()) {
            *counts.entry(i).or_default() += 1;
        }
    }
    SparseCounts {
        dim: vocab.len(),
        entries: counts.into_iter().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::balance_and_split;
    use proptest::prelude::*;

    fn ex(post_id: i64, user_id: i64, label: u8) -> LabeledExample {
        LabeledExample {
            post_id,
            user_id,
            comment: "x".into(),
            title: String::new(),
            path: "p".into(),
            label,
        }
    }

    fn toks(xs: &[&[&str]]) -> Vec<Vec<String>> {
        xs.iter().map(|d| d.iter().map(|s| s.to_string()).collect()).collect()
    }

    #[test]
    fn ratio_examples() {
        let simple = RatioConfig::new(RatioMode::Simple, 0.5).unwrap();
        let full = RatioConfig::new(RatioMode::Full, 0.5).unwrap();
        let r = UserHistoryRecord::new(1, 3, 2, 0, 0);
        assert!((online_ratio(Some(&r), &simple) - 2.0 / 3.0).abs() < 1e-15);
        let r = UserHistoryRecord::new(1, 3, 2, 2, 2);
        assert_eq!(online_ratio(Some(&r), &full), 0.8);
        assert_eq!(online_ratio(None, &full), 0.5);
        let empty_train = UserHistoryRecord::new(1, 0, 0, 4, 4);
        assert_eq!(online_ratio(Some(&empty_train), &simple), 0.5);
        assert_eq!(online_ratio(Some(&empty_train), &full), 1.0);
        assert!(RatioConfig::new(RatioMode::Full, 1.5).is_err());
    }

    #[test]
    fn history_counts_and_leakage() {
        let mut xs = vec![ex(1, 7, 0), ex(2, 7, 0), ex(3, 7, 1)];
        xs.extend((10..30).map(|i| ex(i, i % 4, (i % 3 == 0) as u8)));
        let plan = balance_and_split(&xs, 0.2, 0.2, 3).unwrap();
        let index = history_from_plan(&plan, &xs).unwrap();
        for (&user, rec) in &index {
            let train: Vec<_> = xs
                .iter()
                .filter(|e| e.user_id == user && plan.train.contains(&e.post_id))
                .collect();
            assert_eq!(rec.c_train as usize, train.len());
            assert_eq!(
                rec.c_online_train as usize,
                train.iter().filter(|e| e.label == 0).count()
            );
            assert_eq!(rec.c_ds, rec.c_online_ds);
        }
        assert!(!index.contains_key(&99));

        let held_out = xs.iter().find(|e| plan.is_held_out(e.post_id)).unwrap();
        let err = build_history_index(&plan, [held_out], []).unwrap_err();
        assert!(matches!(err, FeatureError::Leakage { .. }));

        let train_row = xs.iter().find(|e| plan.train.contains(&e.post_id)).unwrap();
        let err = build_history_index(&plan, [], [train_row]).unwrap_err();
        assert!(matches!(err, FeatureError::PartitionMismatch { .. }));
    }

    #[test]
    fn direct_user_recount() {
        // user 7 with training rows labeled [0, 0, 1]
        let xs = vec![ex(1, 7, 0), ex(2, 7, 0), ex(3, 7, 1)];
        let plan = SplitPlan {
            train: [1, 2, 3].into(),
            val: Default::default(),
            test: Default::default(),
            ds_pool: Default::default(),
            seed: 0,
            val_frac: 0.1,
            test_frac: 0.1,
            rng: "manual".into(),
        };
        let index = history_from_plan(&plan, &xs).unwrap();
        assert_eq!(index[&7], UserHistoryRecord::new(7, 3, 2, 0, 0));
    }

    #[test]
    fn history_export_round_trip() {
        let mut index = HistoryIndex::new();
        index.insert(3, UserHistoryRecord::new(3, 4, 1, 2, 2));
        index.insert(-1, UserHistoryRecord::new(-1, 0, 0, 1, 1));
        let text = export_history(&index);
        assert_eq!(text, "-1,0,0,1,1\n3,4,1,2,2\n");
        assert_eq!(import_history(&text).unwrap(), index);
        assert!(import_history("1,1,2,0,0\n").is_err());
    }

    #[test]
    fn vocabulary_examples() {
        let docs = toks(&[&["a", "b"], &["b", "c"]]);
        let v = fit_count_vocabulary(&docs, 1).unwrap();
        assert_eq!(v.tokens().collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(v.get("c"), Some(2));
        let v2 = fit_count_vocabulary(&docs, 2).unwrap();
        assert_eq!(v2.tokens().collect::<Vec<_>>(), ["b"]);
        let empty: Vec<Vec<String>> = vec![];
        assert_eq!(fit_count_vocabulary(&empty, 1), Err(FeatureError::EmptyCorpus));
        assert_eq!(CountVocabulary::import(&v.export(), 2).unwrap(), v);
    }

    #[test]
    fn transform_examples() {
        let v = fit_count_vocabulary(&toks(&[&["a", "b"]]), 1).unwrap();
        let c = transform_counts(&v, &["a", "a", "z"]);
        assert_eq!(c.entries, vec![(0, 2)]);
        assert_eq!(c.dim, 2);
        assert_eq!(transform_counts::<&str>(&v, &[]).to_dense(), vec![0.0, 0.0]);
        let vb = fit_count_vocabulary(&toks(&[&["b"], &["b"]]), 2).unwrap();
        assert_eq!(transform_counts(&vb, &["b", "b", "b"]).entries, vec![(0, 3)]);
    }

    fn record() -> impl Strategy<Value = UserHistoryRecord> {
        (0u32..50, 0u32..50, 0u32..50, 0u32..50)
            .prop_map(|(a, b, c, d)| UserHistoryRecord::new(1, a.max(b), a.min(b), c.max(d), c.min(d)))
    }

    proptest! {
        #[test]
        fn ratios_bounded_and_monotone(r in record(), default in 0.0f64..=1.0) {
            for mode in [RatioMode::Simple, RatioMode::Full] {
                let cfg = RatioConfig { mode, default_ratio: default };
                let base = online_ratio(Some(&r), &cfg);
                prop_assert!((0.0..=1.0).contains(&base));
                let mut up = r;
                up.c_train += 1;
                up.c_online_train += 1;
                let mut down = r;
                down.c_train += 1;
                prop_assert!(online_ratio(Some(&up), &cfg) >= base);
                prop_assert!(online_ratio(Some(&down), &cfg) <= base);
            }
            let mut no_ds = r;
            no_ds.c_ds = 0;
            no_ds.c_online_ds = 0;
            let s = RatioConfig { mode: RatioMode::Simple, default_ratio: default };
            let f = RatioConfig { mode: RatioMode::Full, default_ratio: default };
            prop_assert_eq!(online_ratio(Some(&no_ds), &s), online_ratio(Some(&no_ds), &f));
        }

        #[test]
        fn held_out_sequences_add_no_columns(
            train in proptest::collection::vec(proptest::collection::vec("[a-e]", 1..5), 1..10),
            other in proptest::collection::vec("[a-z]", 0..20),
        ) {
            let v = fit_count_vocabulary(&train, 1).unwrap();
            let c = transform_counts(&v, &other);
            prop_assert_eq!(c.dim, v.len());
            prop_assert!(c.entries.iter().all(|&(i, _)| i < v.len()));
        }
    }
}
