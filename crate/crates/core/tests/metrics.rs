use spectromind::metrics::*;
use spectromind::Error;

fn one_hot(k: usize, c: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[c] = 1.0;
    v
}

#[test]
fn perfect_predictions() {
    let labels: Vec<usize> = (0..40).collect();
    let probs: Vec<Vec<f64>> = labels.iter().map(|&y| one_hot(40, y)).collect();
    let m = Metrics::compute(&probs, &labels).unwrap();
    assert_eq!((m.top1, m.top3, m.top5, m.macro_f1, m.kappa), (1.0, 1.0, 1.0, 1.0, 1.0));
}

#[test]
fn uniform_predictor_tie_break() {
    let labels: Vec<usize> = (0..400).map(|i| i % 40).collect();
    let probs = vec![vec![1.0 / 40.0; 40]; 400];
    assert_eq!(topk_accuracy(&probs, &labels, 5).unwrap(), 0.125);
    assert_eq!(topk_accuracy(&probs, &labels, 40).unwrap(), 1.0);
}

#[test]
fn hand_built_top3() {
    let probs = vec![
        vec![0.5, 0.3, 0.1, 0.1],
        vec![0.1, 0.2, 0.3, 0.4],
        vec![0.4, 0.3, 0.2, 0.1],
        vec![0.25, 0.25, 0.25, 0.25],
    ];
    // labels ranked 2nd, 4th, 3rd, 3rd (tie resolved by index)
    let labels = [1, 0, 2, 2];
    assert_eq!(topk_accuracy(&probs, &labels, 3).unwrap(), 0.75);
}

#[test]
fn two_class_confusion() {
    // confusion [[2,1],[1,2]]
    let labels = [0, 0, 0, 1, 1, 1];
    let pred = [0, 0, 1, 0, 1, 1];
    assert!((cohens_kappa(&pred, &labels, 2).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!((macro_f1(&pred, &labels, 2).unwrap().value - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn constant_predictor_kappa_zero() {
    let labels: Vec<usize> = (0..400).map(|i| i % 40).collect();
    let pred = vec![7; 400];
    assert_eq!(cohens_kappa(&pred, &labels, 40).unwrap(), 0.0);
}

#[test]
fn absent_classes_flagged() {
    let f = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
    assert_eq!(f.absent, vec![2]);
    assert!((f.value - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn relabeling_invariance() {
    let labels = [0, 1, 2, 2, 1, 0, 1];
    let pred = [0, 2, 2, 1, 1, 0, 0];
    let perm = [2, 0, 1];
    let pl: Vec<usize> = labels.iter().map(|&v| perm[v]).collect();
    let pp: Vec<usize> = pred.iter().map(|&v| perm[v]).collect();
    assert!((cohens_kappa(&pred, &labels, 3).unwrap() - cohens_kappa(&pp, &pl, 3).unwrap()).abs() < 1e-12);
    assert!((macro_f1(&pred, &labels, 3).unwrap().value - macro_f1(&pp, &pl, 3).unwrap().value).abs() < 1e-12);
}

#[test]
fn errors() {
    assert!(matches!(cohens_kappa(&[], &[], 2), Err(Error::Argument(_))));
    assert!(matches!(topk_accuracy(&[vec![1.0, 0.0]], &[0, 1], 1), Err(Error::Argument(_))));
    let ids = vec!["a".to_string(), "b".to_string()];
    assert!(matches!(check_disjoint(["b"], &ids), Err(Error::Contamination(_))));
    assert!(check_disjoint(["c"], &ids).is_ok());
}

fn subject(id: &str, top1: f64) -> SubjectMetrics {
    SubjectMetrics {
        subject_id: id.into(),
        trials: 10,
        metrics: Metrics {
            top1,
            top3: top1,
            top5: top1,
            macro_f1: top1,
            kappa: top1,
        },
    }
}

#[test]
fn aggregate_population_std() {
    let r = EvalReport::aggregate("m", "h", vec![subject("a", 0.4), subject("b", 0.6)]).unwrap();
    assert!((r.mean.top1 - 0.5).abs() < 1e-12);
    assert!((r.std.top1 - 0.1).abs() < 1e-12);
    let single = EvalReport::aggregate("m", "h", vec![subject("a", 0.4)]).unwrap();
    assert_eq!(single.std.top1, 0.0);
    let table = render_table(&[r.clone()]);
    assert!(table.contains("0.5000 (0.1000)"));
    assert!(render_csv(&[r]).lines().count() == 2);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn topk_monotone(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..30), seed in 0usize..6) {
            let labels: Vec<usize> = (0..rows.len()).map(|i| (i + seed) % 6).collect();
            let mut prev = 0.0;
            for k in 1..=6 {
                let a = topk_accuracy(&rows, &labels, k).unwrap();
                prop_assert!(a >= prev);
                prev = a;
            }
            prop_assert_eq!(prev, 1.0);
        }

        #[test]
        fn kappa_bounded(pred in prop::collection::vec(0usize..4, 1..50), shift in 0usize..4) {
            let labels: Vec<usize> = pred.iter().enumerate().map(|(i, &p)| (p + shift * (i % 2)) % 4).collect();
            let k = cohens_kappa(&pred, &labels, 4).unwrap();
            prop_assert!((-1.0..=1.0).contains(&k));
        }
    }
}
