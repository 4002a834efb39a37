use numina_core::metrics::{count_acc, evaluate, temporal_consistency, MetricsError};
use numina_core::record::CountRecord;
use proptest::prelude::*;

fn record(targets: Vec<u32>, frames: Vec<Vec<u32>>) -> CountRecord {
    CountRecord {
        classes: (0..targets.len()).map(|i| format!("c{i}")).collect(),
        targets,
        per_frame_counts: frames,
    }
}

fn arb_record() -> impl Strategy<Value = CountRecord> {
    (1usize..4, 1usize..7).prop_flat_map(|(classes, frames)| {
        (
            prop::collection::vec(1u32..9, classes),
            prop::collection::vec(prop::collection::vec(0u32..9, classes), frames),
        )
            .prop_map(|(t, f)| record(t, f))
    })
}

proptest! {
    #[test]
    fn bounded(rec in arb_record()) {
        let acc = count_acc(&rec).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        if let Ok(tc) = temporal_consistency(&rec) {
            prop_assert!((0.0..=1.0).contains(&tc));
        }
    }

    #[test]
    fn tc_counts_changes(rec in arb_record()) {
        prop_assume!(rec.frames() >= 2);
        let classes = rec.classes.len();
        let pairs = rec.frames() - 1;
        let changes = rec
            .per_frame_counts
            .windows(2)
            .map(|w| w[0].iter().zip(&w[1]).filter(|(a, b)| a != b).count())
            .sum::<usize>();
        let expected = 1.0 - changes as f64 / (pairs * classes) as f64;
        prop_assert!((temporal_consistency(&rec).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn class_order_does_not_matter(rec in arb_record(), rot in 0usize..3) {
        let k = rot % rec.classes.len();
        let mut turned = rec.clone();
        turned.classes.rotate_left(k);
        turned.targets.rotate_left(k);
        for row in &mut turned.per_frame_counts {
            row.rotate_left(k);
        }
        prop_assert!((count_acc(&rec).unwrap() - count_acc(&turned).unwrap()).abs() < 1e-12);
        if rec.frames() >= 2 {
            let (a, b) = (temporal_consistency(&rec).unwrap(), temporal_consistency(&turned).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn appending_a_frame_at_the_mean_keeps_accuracy(rec in arb_record()) {
        let classes = rec.classes.len();
        let acc = count_acc(&rec).unwrap();
        let matches = acc * classes as f64;
        prop_assume!((matches - matches.round()).abs() < 1e-9);
        let matches = matches.round() as usize;
        let frame = rec
            .targets
            .iter()
            .enumerate()
            .map(|(i, &t)| if i < matches { t } else { t + 1 })
            .collect();
        let mut longer = rec.clone();
        longer.per_frame_counts.push(frame);
        prop_assert!((count_acc(&longer).unwrap() - acc).abs() < 1e-12);
    }

    #[test]
    fn breakdowns_reconcile(recs in prop::collection::vec(arb_record(), 1..20)) {
        let report = evaluate(&recs).unwrap();
        let per_record = report.per_record.iter().map(|m| m.count_acc).sum::<f64>() / recs.len() as f64;
        prop_assert!((report.count_acc - per_record).abs() < 1e-12);
        let weighted: f64 = report.per_numeral.iter().map(|b| b.count_acc * b.records as f64).sum();
        prop_assert_eq!(report.per_numeral.iter().map(|b| b.records).sum::<usize>(), recs.len());
        prop_assert!((report.count_acc - weighted / recs.len() as f64).abs() < 1e-12);
    }
}

#[test]
fn worked_examples() {
    let mixed = record(vec![2, 3], vec![vec![2, 1], vec![2, 3]]);
    assert_eq!(count_acc(&mixed).unwrap(), 0.75);
    let drift = record(vec![2], vec![vec![2], vec![2], vec![3]]);
    assert_eq!(temporal_consistency(&drift).unwrap(), 0.5);
    let perfect = record(vec![1, 4], vec![vec![1, 4]; 3]);
    assert_eq!(count_acc(&perfect).unwrap(), 1.0);
    assert_eq!(temporal_consistency(&perfect).unwrap(), 1.0);
}

#[test]
fn short_records() {
    let single = record(vec![2], vec![vec![2]]);
    assert!(matches!(
        temporal_consistency(&single),
        Err(MetricsError::TooFewFrames {
            frames: 1,
            needed: 2
        })
    ));
    assert_eq!(evaluate(&[single]).unwrap().tc, None);
    let empty = record(vec![2], vec![]);
    assert!(count_acc(&empty).is_err());
}
