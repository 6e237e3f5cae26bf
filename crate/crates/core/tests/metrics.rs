use leafkit::metrics::{
    accuracy, confusion, mcc_binary, mcc_multiclass, per_class_prf, percent, weighted_f1, ConfusionMatrix,
    MetricsReport,
};
use proptest::prelude::*;

fn reference() -> ConfusionMatrix {
    ConfusionMatrix::from_counts(vec![vec![62, 6, 0], vec![0, 58, 4], vec![0, 1, 64]]).unwrap()
}

/// Scores written out as fractions over the reference matrix.
#[test]
fn reference_matrix_hand_fractions() {
    let cm = reference();
    let s = per_class_prf(&cm);
    let expect = [
        (62.0 / 62.0, 62.0 / 68.0, 124.0 / 130.0, 68),
        (58.0 / 65.0, 58.0 / 62.0, 116.0 / 127.0, 62),
        (64.0 / 68.0, 64.0 / 65.0, 128.0 / 133.0, 65),
    ];
    for (got, (p, r, f, n)) in s.iter().zip(expect) {
        assert!((got.precision - p).abs() < 1e-15);
        assert!((got.recall - r).abs() < 1e-15);
        assert!((got.f1 - f).abs() < 1e-15);
        assert_eq!(got.support, n);
    }
    assert_eq!(accuracy(&cm), 184.0 / 195.0);
    let wf1 = (68.0 * 124.0 / 130.0 + 62.0 * 116.0 / 127.0 + 65.0 * 128.0 / 133.0) / 195.0;
    assert!((weighted_f1(&cm) - wf1).abs() < 1e-15);
    // c·s − Σpₖtₖ = 184·195 − (62·68 + 65·62 + 68·65) = 23214
    // both marginals are {62, 65, 68}, so s² − Σpₖ² = s² − Σtₖ² = 38025 − 12693 = 25332
    let mcc = 23214.0 / 25332.0;
    assert!((mcc_multiclass(&cm) - mcc).abs() < 1e-15);
    assert!((mcc - 0.916_39).abs() < 1e-5);
}

#[test]
fn reference_matrix_reported_percentages() {
    let report = MetricsReport::from_confusion(&reference());
    assert_eq!(report.accuracy, 94.36);
    assert_eq!(report.weighted_f1, 94.38);
    assert_eq!(report.mcc, 91.64);
    let table: Vec<(f64, f64, f64)> = report.per_class.iter().map(|c| (c.precision, c.recall, c.f1)).collect();
    assert_eq!(table, vec![(100.00, 91.18, 95.38), (89.23, 93.55, 91.34), (94.12, 98.46, 96.24)]);
    assert!(report.warnings.is_empty());
    let json = serde_json::to_string(&report).unwrap();
    assert!(json.contains("\"mcc\":91.64"), "{json}");
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}

#[test]
fn anti_diagonal_counts() {
    let cm = confusion(&[0, 1, 2], &[2, 1, 0], 3).unwrap();
    for t in 0..3 {
        for p in 0..3 {
            assert_eq!(cm.get(t, p), u64::from(t + p == 2));
        }
    }
}

#[test]
fn display_lists_every_score() {
    let text = MetricsReport::from_confusion(&reference()).to_string();
    for needle in ["94.36%", "94.38%", "91.64%", "89.23%", "98.46%"] {
        assert!(text.contains(needle), "{needle} missing from\n{text}");
    }
}

fn matrix(k: usize) -> impl Strategy<Value = ConfusionMatrix> {
    proptest::collection::vec(0u64..50, k * k)
        .prop_map(move |v| ConfusionMatrix::from_counts(v.chunks(k).map(<[u64]>::to_vec).collect()).unwrap())
}

proptest! {
    #[test]
    fn two_class_mcc_matches_binary_formula(tn in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tp in 0u64..500) {
        let cm = ConfusionMatrix::from_counts(vec![vec![tn, fp], vec![fn_, tp]]).unwrap();
        let multi = mcc_multiclass(&cm);
        let binary = mcc_binary(tp, tn, fp, fn_);
        prop_assert!((multi - binary).abs() < 1e-12, "{} vs {}", multi, binary);
    }

    #[test]
    fn permutation_moves_class_scores_only(cm in matrix(3), perm_id in 0usize..6) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = perms[perm_id];
        let pm = cm.permuted(&perm).unwrap();
        prop_assert_eq!(accuracy(&pm), accuracy(&cm));
        prop_assert!((weighted_f1(&pm) - weighted_f1(&cm)).abs() < 1e-12);
        prop_assert!((mcc_multiclass(&pm) - mcc_multiclass(&cm)).abs() < 1e-12);
        let before = per_class_prf(&cm);
        let after = per_class_prf(&pm);
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(after[i], before[p]);
        }
    }

    #[test]
    fn weighted_f1_is_scale_invariant(cm in matrix(3), factor in 1u64..20) {
        let scaled = ConfusionMatrix::from_counts(
            cm.counts().iter().map(|r| r.iter().map(|v| v * factor).collect()).collect(),
        ).unwrap();
        prop_assert!((weighted_f1(&scaled) - weighted_f1(&cm)).abs() < 1e-12);
    }

    #[test]
    fn mcc_is_bounded_and_one_only_without_errors(cm in matrix(3)) {
        let m = mcc_multiclass(&cm);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&m), "{}", m);
        let off_diagonal: u64 = cm.total() - cm.trace();
        if (m - 1.0).abs() < 1e-12 {
            prop_assert_eq!(off_diagonal, 0);
        }
        let populated = cm.true_counts().iter().filter(|&&t| t > 0).count();
        if off_diagonal == 0 && populated >= 2 {
            prop_assert!((m - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_is_trace_over_total(cm in matrix(4)) {
        prop_assume!(cm.total() > 0);
        prop_assert_eq!(accuracy(&cm), cm.trace() as f64 / cm.total() as f64);
        prop_assert!(percent(accuracy(&cm)) <= 100.0);
    }
}
