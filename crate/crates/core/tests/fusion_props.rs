mod common;

use proptest::prelude::*;

use reassign_core::detector::{roc_curve, RocCurve, RocPoint};
use reassign_core::fusion::{
    all_crisp, apply_boolean, bbc2_combine, ibc_combine, wpibc_build, BooleanOp, EnsembleModel,
    Fusion, IbcConfig, Responses, ScoredDetector, WpibcConfig,
};
use reassign_core::trace::{extract_traces, normalize_frame, Dialect, Frame};

/// Piecewise-linear TPR of `curve` at `fpr`.
fn interpolate(curve: &RocCurve, fpr: f64) -> f64 {
    let pts = curve.points();
    let mut best = 0.0f64;
    for w in pts.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.fpr <= fpr && fpr <= b.fpr {
            let y = if b.fpr == a.fpr {
                a.tpr.max(b.tpr)
            } else {
                a.tpr + (b.tpr - a.tpr) * (fpr - a.fpr) / (b.fpr - a.fpr)
            };
            best = best.max(y);
        }
    }
    best
}

fn assert_dominates(fusion: &Fusion, detectors: &[&ScoredDetector]) {
    let composite = fusion.ensemble.composite_curve().unwrap();
    for d in detectors {
        for p in roc_curve(&d.scores).unwrap().points() {
            let y = interpolate(&composite, p.fpr);
            assert!(y >= p.tpr - 1e-12, "({}, {}) above composite {y}", p.fpr, p.tpr);
        }
    }
}

fn base_scores(fusion: &Fusion, raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    fusion.stats.bases.iter().map(|&i| raw[i].clone()).collect()
}

fn assert_replay_exact(ensemble: &EnsembleModel, raw: &[Vec<f64>], labels: &[bool]) {
    let positives = Responses::from_bools(labels);
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    for (i, rule) in ensemble.rules.iter().enumerate() {
        let (tp, fp) = ensemble.replay(i, raw).unwrap().counts(&positives);
        assert_eq!((tp, fp), (rule.tp, rule.fp), "rule {i}");
        let p = RocPoint::from_counts(tp, fp, n_pos, n_neg, 0.0);
        assert_eq!(p.fpr.to_bits(), rule.fpr.to_bits());
        assert_eq!(p.tpr.to_bits(), rule.tpr.to_bits());
    }
}

fn assert_predictions_match_replay(ensemble: &EnsembleModel, raw: &[Vec<f64>]) {
    let bulk = ensemble.replay(ensemble.operating_rule, raw).unwrap();
    for row in 0..bulk.len() {
        let scores: Vec<Option<f64>> = raw.iter().map(|c| Some(c[row])).collect();
        assert_eq!(ensemble.predict(&scores).unwrap().decision, bulk.get(row), "row {row}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ibc_dominates_every_input(seed in any::<u64>()) {
        let (raw, labels, detectors) = common::random_detector_set(seed);
        let fusion = ibc_combine("f", &detectors, &IbcConfig::default()).unwrap();
        assert_dominates(&fusion, &detectors.iter().collect::<Vec<_>>());
        assert_replay_exact(&fusion.ensemble, &base_scores(&fusion, &raw), &labels);
    }

    #[test]
    fn wpibc_dominates_its_bases(seed in any::<u64>()) {
        let (raw, labels, detectors) = common::random_detector_set(seed);
        let fusion = wpibc_build("f", &detectors, &WpibcConfig::default()).unwrap();
        let bases: Vec<&ScoredDetector> = fusion.stats.bases.iter().map(|&i| &detectors[i]).collect();
        assert_dominates(&fusion, &bases);
        assert_replay_exact(&fusion.ensemble, &base_scores(&fusion, &raw), &labels);
    }

    #[test]
    fn bbc2_dominates_its_crisp_inputs(seed in any::<u64>()) {
        let (raw, labels, mut detectors) = common::random_detector_set(seed);
        detectors.truncate(2);
        let fusion = bbc2_combine("f", &detectors, &all_crisp(&detectors)).unwrap();
        assert_dominates(&fusion, &detectors.iter().collect::<Vec<_>>());
        assert_replay_exact(&fusion.ensemble, &raw[..2], &labels);
    }

    #[test]
    fn pass_aucs_never_decrease(seed in any::<u64>()) {
        let (_, _, detectors) = common::random_detector_set(seed);
        let fusion = ibc_combine("f", &detectors, &IbcConfig { max_passes: 4, min_auc_gain: 0.0 }).unwrap();
        for w in fusion.stats.pass_aucs.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12, "{:?}", fusion.stats.pass_aucs);
        }
        prop_assert!((fusion.auc() - *fusion.stats.pass_aucs.last().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn composite_is_a_convex_chain(seed in any::<u64>()) {
        let (_, _, detectors) = common::random_detector_set(seed);
        let fusion = ibc_combine("f", &detectors, &IbcConfig::default()).unwrap();
        let rules = &fusion.ensemble.rules;
        prop_assert_eq!((rules[0].tp, rules[0].fp), (0, 0));
        for w in rules.windows(2) {
            prop_assert!(w[1].fp >= w[0].fp && w[1].tp >= w[0].tp);
            prop_assert!((w[1].fp, w[1].tp) != (w[0].fp, w[0].tp));
        }
        // Slopes strictly decrease, compared with integer cross products.
        for w in rules.windows(3) {
            let (dx1, dy1) = ((w[1].fp - w[0].fp) as i64, (w[1].tp - w[0].tp) as i64);
            let (dx2, dy2) = ((w[2].fp - w[1].fp) as i64, (w[2].tp - w[1].tp) as i64);
            prop_assert!(dy1 * dx2 > dy2 * dx1);
        }
    }

    #[test]
    fn serialised_ensemble_predicts_identically(seed in any::<u64>()) {
        let (raw, _, detectors) = common::random_detector_set(seed);
        let fusion = wpibc_build("f", &detectors, &WpibcConfig::default()).unwrap();
        let json = serde_json::to_string(&fusion.ensemble).unwrap();
        let back: EnsembleModel = serde_json::from_str(&json).unwrap();
        back.check().unwrap();
        prop_assert_eq!(&back, &fusion.ensemble);
        let base_raw = base_scores(&fusion, &raw);
        assert_predictions_match_replay(&back, &base_raw);
    }

    #[test]
    fn packed_combination_matches_scalar(
        a in prop::collection::vec(any::<bool>(), 0..200),
        seed in any::<u64>(),
        op in 0usize..10,
    ) {
        let b: Vec<bool> = a.iter().enumerate().map(|(i, x)| x ^ ((seed >> (i % 64)) & 1 == 1)).collect();
        let op = BooleanOp::ALL[op];
        let packed = Responses::from_bools(&a).combine(op, &Responses::from_bools(&b)).to_bools();
        prop_assert_eq!(packed, apply_boolean(op, &a, &b).unwrap());
    }

    #[test]
    fn eclipse_lines_round_trip(
        names in prop::collection::vec("[a-z]{1,6}(\\.[a-z]{1,6}){1,3}\\.[A-Z][a-zA-Z0-9]{0,6}\\.[a-z][a-zA-Z0-9]{0,8}", 1..12),
    ) {
        let frames: Vec<Frame> = names.iter().map(Frame::new).collect();
        let mut text = String::from("java.lang.IllegalStateException: boom\n");
        for f in &frames {
            let line = f.to_line(Dialect::Eclipse);
            prop_assert_eq!(&normalize_frame(&line, Dialect::Eclipse).unwrap().function, &f.function);
            text.push_str(&line);
            text.push('\n');
        }
        let traces = extract_traces(&text, Dialect::Eclipse);
        prop_assert_eq!(traces.len(), 1);
        let got: Vec<&str> = traces[0].function_names().collect();
        prop_assert_eq!(got, names.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn gnome_lines_round_trip(
        names in prop::collection::vec("[a-z_][a-z0-9_]{0,15}", 1..12),
    ) {
        let mut text = String::from("Backtrace:\n");
        for (i, name) in names.iter().enumerate() {
            let mut f = Frame::new(name.as_str());
            f.position = Some(i);
            let line = f.to_line(Dialect::Gnome);
            prop_assert_eq!(&normalize_frame(&line, Dialect::Gnome).unwrap().function, name);
            text.push_str(&line);
            text.push('\n');
        }
        let traces = extract_traces(&text, Dialect::Gnome);
        prop_assert_eq!(traces.len(), 1);
        let got: Vec<&str> = traces[0].function_names().collect();
        prop_assert_eq!(got, names.iter().map(String::as_str).collect::<Vec<_>>());
    }
}
