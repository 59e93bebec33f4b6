mod common;

use std::collections::BTreeMap;

use common::rng;
use modctx_core::baselines::*;
use modctx_core::features::{fit_count_vocabulary, transform_counts, SparseCounts};
use proptest::prelude::*;
use rand::Rng;

const WORDS: [&str; 12] = [
    "TITEL",
    "KOMMENTAR",
    "wien",
    "idiot",
    "gut",
    "schlecht",
    "regierung",
    "lüge",
    "danke",
    "bitte",
    "LINK",
    "ö",
];

fn docs_strategy() -> impl Strategy<Value = Vec<Vec<String>>> {
    proptest::collection::vec(
        proptest::collection::vec(proptest::sample::select(WORDS.to_vec()).prop_map(String::from), 0..12),
        1..40,
    )
}

fn random_dataset(seed: u64, n: usize, dim: usize) -> (Vec<SparseCounts>, Vec<u8>) {
    let mut r = rng(seed);
    let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let vectors = labels
        .iter()
        .map(|&y| {
            let mut counts = BTreeMap::new();
            for _ in 0..r.gen_range(1..8) {
                // Label-dependent token preference keeps the problem learnable.
                let i = if r.gen_bool(0.6) {
                    (y as usize) * dim / 2 + r.gen_range(0..dim / 2)
                } else {
                    r.gen_range(0..dim)
                };
                *counts.entry(i).or_insert(0u32) += 1;
            }
            SparseCounts {
                dim,
                entries: counts.into_iter().collect(),
            }
        })
        .collect();
    (vectors, labels)
}

proptest! {
    #[test]
    fn vocabulary_keeps_exactly_the_tokens_with_enough_documents(docs in docs_strategy(), min_df in 1usize..4) {
        let vocab = fit_count_vocabulary(&docs, min_df).unwrap();
        let mut expected: Vec<&str> = WORDS
            .iter()
            .copied()
            .filter(|w| docs.iter().filter(|d| d.iter().any(|t| t == w)).count() >= min_df)
            .collect();
        expected.sort();
        prop_assert_eq!(vocab.tokens().collect::<Vec<_>>(), expected.clone());
        for (i, w) in expected.iter().enumerate() {
            prop_assert_eq!(vocab.get(w), Some(i));
        }
        for doc in &docs {
            let dense = transform_counts(&vocab, doc).to_dense();
            for (i, w) in expected.iter().enumerate() {
                prop_assert_eq!(dense[i], doc.iter().filter(|t| t == w).count() as f64);
            }
        }
    }
}

/// Naive Bayes posterior computed densely from raw counts.
fn nb_oracle(train: &[SparseCounts], labels: &[u8], alpha: f64, x: &SparseCounts) -> f64 {
    let dim = x.dim;
    let mut log_post = [0.0f64; 2];
    for k in 0..2u8 {
        let docs: Vec<&SparseCounts> = train
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == k)
            .map(|(v, _)| v)
            .collect();
        let mut per_token = vec![0.0; dim];
        for v in &docs {
            for (i, c) in v.to_dense().into_iter().enumerate() {
                per_token[i] += c;
            }
        }
        let total: f64 = per_token.iter().sum();
        let mut lp = (docs.len() as f64 / train.len() as f64).ln();
        for (i, c) in x.to_dense().into_iter().enumerate() {
            lp += c * ((per_token[i] + alpha) / (total + alpha * dim as f64)).ln();
        }
        log_post[k as usize] = lp;
    }
    1.0 / (1.0 + (log_post[0] - log_post[1]).exp())
}

#[test]
fn naive_bayes_matches_dense_bayes_rule() {
    for seed in 0..20 {
        let (vectors, labels) = random_dataset(seed, 60, 10);
        for alpha in [0.5, 1.0, 3.0] {
            let hyper = ShallowHyper {
                nb_alpha: alpha,
                ..Default::default()
            };
            let model = train_shallow(ShallowKind::MultinomialNaiveBayes, &vectors, &labels, &hyper).unwrap();
            for x in &vectors {
                let got = model.predict_proba(x).unwrap();
                let want = nb_oracle(&vectors, &labels, alpha, x);
                assert!((got - want).abs() < 1e-10, "seed {seed} alpha {alpha}: {got} vs {want}");
            }
        }
    }
}

/// Gradient of `‖w‖²/(2C) + Σ logloss` evaluated densely.
fn lr_gradient(m: &LogisticRegression, vectors: &[SparseCounts], labels: &[u8]) -> Vec<f64> {
    let dim = m.weights.len();
    let mut g: Vec<f64> = m.weights.iter().map(|w| w / m.c).chain([0.0]).collect();
    for (v, &y) in vectors.iter().zip(labels) {
        let x = v.to_dense();
        let z = m.bias + x.iter().zip(&m.weights).map(|(a, b)| a * b).sum::<f64>();
        let r = 1.0 / (1.0 + (-z).exp()) - y as f64;
        for i in 0..dim {
            g[i] += r * x[i];
        }
        g[dim] += r;
    }
    g
}

#[test]
fn logistic_regression_reaches_a_stationary_point() {
    for seed in 0..10 {
        let (vectors, labels) = random_dataset(100 + seed, 80, 12);
        for c in [0.1, 1.0, 10.0] {
            let hyper = ShallowHyper {
                lr_c: c,
                lr_tol: 1e-6,
                ..Default::default()
            };
            let ShallowModel::Logistic(m) =
                train_shallow(ShallowKind::LogisticRegression, &vectors, &labels, &hyper).unwrap()
            else {
                panic!("wrong model kind");
            };
            assert!(m.converged, "seed {seed} C {c} did not converge");
            let worst = lr_gradient(&m, &vectors, &labels)
                .iter()
                .fold(0.0f64, |a, g| a.max(g.abs()));
            assert!(worst <= 1e-6, "seed {seed} C {c}: gradient {worst}");
        }
    }
}

#[test]
fn stronger_regularization_shrinks_weights() {
    let (vectors, labels) = random_dataset(7, 100, 8);
    let norm = |c: f64| {
        let hyper = ShallowHyper {
            lr_c: c,
            ..Default::default()
        };
        match train_shallow(ShallowKind::LogisticRegression, &vectors, &labels, &hyper).unwrap() {
            ShallowModel::Logistic(m) => m.weights.iter().map(|w| w * w).sum::<f64>(),
            _ => unreachable!(),
        }
    };
    assert!(norm(0.01) < norm(1.0));
    assert!(norm(1.0) < norm(100.0));
}

#[test]
fn models_survive_export_and_import() {
    let (vectors, labels) = random_dataset(3, 50, 9);
    for kind in ShallowKind::ALL {
        let model = train_shallow(kind, &vectors, &labels, &ShallowHyper::default()).unwrap();
        let back = ShallowModel::import(&model.export()).unwrap();
        assert_eq!(back.kind(), kind);
        assert_eq!(
            back.predict_batch(&vectors).unwrap(),
            model.predict_batch(&vectors).unwrap()
        );
    }
}

#[test]
fn invalid_training_inputs_are_rejected() {
    let (vectors, labels) = random_dataset(4, 20, 6);
    let h = ShallowHyper::default();
    assert!(matches!(
        train_shallow(ShallowKind::LogisticRegression, &vectors, &[0; 20], &h),
        Err(ShallowError::SingleClass {
            positives: 0,
            total: 20
        })
    ));
    assert!(matches!(
        train_shallow(ShallowKind::MultinomialNaiveBayes, &vectors[..5], &labels, &h),
        Err(ShallowError::LengthMismatch { .. })
    ));
    let bad = ShallowHyper { nb_alpha: 0.0, ..h };
    assert!(matches!(
        train_shallow(ShallowKind::MultinomialNaiveBayes, &vectors, &labels, &bad),
        Err(ShallowError::Hyper(_))
    ));
    let model = train_shallow(ShallowKind::MultinomialNaiveBayes, &vectors, &labels, &h).unwrap();
    let wrong = SparseCounts {
        dim: 3,
        entries: vec![(0, 1)],
    };
    assert!(model.predict_proba(&wrong).is_err());
}
