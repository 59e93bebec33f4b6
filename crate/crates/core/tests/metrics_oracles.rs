mod common;

use std::collections::BTreeMap;
use std::fs;

use common::{brute_auroc, oracle_metrics};
use modctx_core::evalharness::*;
use modctx_core::llmclient::{Decision, Verdict};
use proptest::prelude::*;

fn labels_and_scores() -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
    (2usize..120)
        .prop_flat_map(|n| {
            (
                proptest::collection::vec(0u8..=1, n),
                proptest::collection::vec(0u32..25, n),
            )
        })
        .prop_filter("both classes", |(y, _)| y.contains(&0) && y.contains(&1))
        .prop_map(|(y, s)| (y, s.into_iter().map(|v| v as f64 / 24.0).collect()))
}

fn verdict(d: Decision) -> Verdict {
    Verdict {
        decision: d,
        raw_response: String::new(),
        strength: None,
        explanation: None,
    }
}

proptest! {
    #[test]
    fn hard_metrics_match_counting_oracle(
        pairs in proptest::collection::vec((0u8..=1, 0u8..=1), 1..200)
    ) {
        let (y, p): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let m = metrics(&y, &p).unwrap();
        let (acc, prec, rec, f1) = oracle_metrics(&y, &p);
        prop_assert!((m.accuracy - acc).abs() <= 1e-12);
        prop_assert!((m.precision - prec).abs() <= 1e-12);
        prop_assert!((m.recall - rec).abs() <= 1e-12);
        prop_assert!((m.f1 - f1).abs() <= 1e-12);
        if m.precision + m.recall > 0.0 {
            let harmonic = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            prop_assert!((m.f1 - harmonic).abs() <= 1e-12);
        }
    }

    #[test]
    fn auroc_matches_pairwise_enumeration((y, s) in labels_and_scores()) {
        let fast = auroc(&y, &s).unwrap();
        prop_assert!((fast - brute_auroc(&y, &s)).abs() <= 1e-12);
    }

    #[test]
    fn auroc_ignores_monotone_rescaling((y, s) in labels_and_scores(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let squashed: Vec<f64> = s.iter().map(|v| (a * v + b).tanh() * 3.0 + v.powi(3)).collect();
        prop_assert_eq!(auroc(&y, &s).unwrap(), auroc(&y, &squashed).unwrap());
    }

    #[test]
    fn pr_curve_points_match_thresholded_counts((y, s) in labels_and_scores()) {
        let curve = precision_recall_curve(&y, &s).unwrap();
        let mut distinct: Vec<f64> = s.clone();
        distinct.sort_by(|a, b| b.partial_cmp(a).unwrap());
        distinct.dedup();
        prop_assert_eq!(curve.len(), distinct.len());
        for (pt, t) in curve.iter().zip(distinct) {
            let preds: Vec<u8> = s.iter().map(|&v| u8::from(v >= t)).collect();
            let (_, prec, rec, _) = oracle_metrics(&y, &preds);
            prop_assert_eq!(pt.threshold, t);
            prop_assert!((pt.precision - prec).abs() <= 1e-12);
            prop_assert!((pt.recall - rec).abs() <= 1e-12);
        }
    }

    #[test]
    fn exclude_policy_drops_only_missing(
        rows in proptest::collection::vec((0u8..=1, 0u8..3), 1..150)
    ) {
        let labels: Vec<u8> = rows.iter().map(|r| r.0).collect();
        let verdicts: Vec<Verdict> = rows
            .iter()
            .map(|r| verdict(match r.1 { 0 => Decision::Keep, 1 => Decision::Remove, _ => Decision::Missing }))
            .collect();
        let missing = rows.iter().filter(|r| r.1 == 2).count();
        let res = evaluate_run("m", &labels, RunOutputs::Verdicts(&verdicts), MissingPolicy::Exclude);
        if missing == rows.len() {
            prop_assert!(res.is_err());
        } else {
            let r = res.unwrap();
            prop_assert_eq!(r.missing_answers, Some(missing));
            prop_assert_eq!(r.n_evaluated, rows.len() - missing);
            prop_assert!(r.auroc.is_none());
            let kept: Vec<(u8, u8)> = rows.iter().filter(|r| r.1 != 2).map(|r| (r.0, r.1)).collect();
            let (y, p): (Vec<u8>, Vec<u8>) = kept.into_iter().unzip();
            prop_assert!((r.accuracy - oracle_metrics(&y, &p).0).abs() <= 1e-12);
        }
    }
}

#[test]
fn documented_auroc_examples() {
    assert_eq!(auroc(&[1, 0, 1, 0], &[0.9, 0.4, 0.35, 0.8]).unwrap(), 0.5);
    assert_eq!(auroc(&[1, 0], &[0.5, 0.5]).unwrap(), 0.5);
    assert_eq!(auroc(&[1, 1, 0], &[0.9, 0.8, 0.1]).unwrap(), 1.0);
    assert!(auroc(&[1, 1], &[0.2, 0.3]).is_err());
}

#[test]
fn fifty_six_missing_out_of_a_thousand() {
    let labels: Vec<u8> = (0..1000).map(|i| (i % 2) as u8).collect();
    let verdicts: Vec<Verdict> = (0..1000)
        .map(|i| {
            if i < 56 {
                verdict(Decision::Missing)
            } else if i % 2 == 0 {
                verdict(Decision::Keep)
            } else {
                verdict(Decision::Remove)
            }
        })
        .collect();
    let r = evaluate_run(
        "GPT_base",
        &labels,
        RunOutputs::Verdicts(&verdicts),
        MissingPolicy::Exclude,
    )
    .unwrap();
    assert_eq!((r.n_evaluated, r.missing_answers), (944, Some(56)));
    assert_eq!(r.accuracy, 1.0);
    let strict = evaluate_run(
        "GPT_base",
        &labels,
        RunOutputs::Verdicts(&verdicts),
        MissingPolicy::Strict,
    )
    .unwrap();
    assert_eq!(strict.n_evaluated, 1000);
    assert!((strict.accuracy - 0.944).abs() < 1e-12);

    let none: Vec<Verdict> = (0..4).map(|_| verdict(Decision::Missing)).collect();
    assert!(evaluate_run("x", &[0, 1, 0, 1], RunOutputs::Verdicts(&none), MissingPolicy::Exclude).is_err());
}

#[test]
fn separable_probabilities_give_auroc_one() {
    let r = evaluate_run(
        "m",
        &[0, 0, 1, 1],
        RunOutputs::Probabilities(&[0.1, 0.2, 0.7, 0.9]),
        MissingPolicy::Exclude,
    )
    .unwrap();
    assert_eq!(r.auroc, Some(1.0));
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.missing_answers, None);
}

fn report(model: &str, accuracy: f64) -> EvalReport {
    EvalReport {
        model: model.into(),
        accuracy,
        auroc: None,
        f1: 0.5,
        precision: 0.5,
        recall: 0.5,
        missing_answers: Some(3),
        n_evaluated: 97,
    }
}

#[test]
fn table_is_sorted_with_name_tie_break() {
    let table = render_table(&[report("b", 0.6), report("c", 0.7), report("a", 0.6)]);
    let rows: Vec<&str> = table.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["c", "a", "b"]);
    assert!(table.starts_with(POSITIVE_CLASS_NOTE));
    assert_eq!(table.lines().nth(1), Some(REPORT_HEADER));
    let one = render_table(&[report("solo", 0.5)]);
    assert_eq!(one.lines().count(), 3);
    assert_eq!(one.lines().nth(2), Some("solo,0.500,/,0.500,0.500,0.500,3,97"));
}

#[test]
fn emitted_files_keep_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = report("m/1", 2.0 / 3.0);
    r.auroc = Some(0.123456789);
    let curves = BTreeMap::from([(
        "m/1".to_string(),
        vec![PrPoint {
            threshold: 0.9,
            precision: 1.0,
            recall: 0.25,
        }],
    )]);
    let files = emit_report(dir.path(), &[r.clone(), report("other", 0.1)], &curves).unwrap();
    let table = fs::read_to_string(&files.table).unwrap();
    assert!(table.contains("m/1,0.667,0.123,"));
    let back: Vec<EvalReport> = serde_json::from_str(&fs::read_to_string(&files.json).unwrap()).unwrap();
    assert_eq!(back[0], r);
    assert_eq!(files.curves.len(), 2);
    assert_eq!(
        fs::read_to_string(dir.path().join("pr/m_1.csv")).unwrap(),
        "precision,recall\n1,0.25\n"
    );
    assert_eq!(
        fs::read_to_string(dir.path().join("pr/other.csv")).unwrap(),
        "precision,recall\n0.5,0.5\n"
    );
}
