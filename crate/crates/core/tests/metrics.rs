mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seld_core::maccdoa::{decode, encode_task, Event, EventList, ACTIVITY_THRESHOLD};
use seld_core::metrics::{acs_transform_labels, angular_error, hungarian, match_events, score, ScoreConfig};
use seld_core::{LABEL_FRAMES, N_CLASSES};

fn assignment_cost(cost: &[f64], cols: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum()
}

#[test]
fn hungarian_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..3000 {
        let rows = rng.gen_range(0..=5);
        let cols = rng.gen_range(0..=5);
        // integer costs make ties common
        let integer = rng.gen_bool(0.5);
        let cost: Vec<f64> = (0..rows * cols)
            .map(|_| {
                if integer {
                    rng.gen_range(0..5) as f64
                } else {
                    rng.gen_range(0.0..180.0)
                }
            })
            .collect();
        let pairs = hungarian(&cost, rows, cols);
        assert_eq!(pairs.len(), rows.min(cols));
        let mut seen_r = vec![false; rows];
        let mut seen_c = vec![false; cols];
        for &(r, c) in &pairs {
            assert!(!seen_r[r] && !seen_c[c]);
            seen_r[r] = true;
            seen_c[c] = true;
        }
        let best = common::brute_force_min_cost(&cost, rows, cols);
        assert!((assignment_cost(&cost, cols, &pairs) - best).abs() <= 1e-9);
    }
}

fn ev(frame: u32, class: usize, az: f64, d: f64) -> Event {
    Event::new(frame, class, az, d)
}

#[test]
fn uncrossed_assignment_is_chosen() {
    let pred = EventList::new(vec![ev(0, 0, 0.0, 1.0), ev(0, 0, 90.0, 1.0)]);
    let reference = EventList::new(vec![ev(0, 0, 85.0, 1.0), ev(0, 0, 5.0, 1.0)]);
    let m = match_events(&pred, &reference);
    let total: f64 = m.pairs.iter().map(|p| p.angular_error_deg).sum();
    assert_eq!(total, 10.0);
    for p in &m.pairs {
        let (a, b) = (pred.events()[p.pred_index].azimuth_deg, reference.events()[p.ref_index].azimuth_deg);
        assert_eq!(angular_error(a, b), 5.0);
    }
}

fn integer_events(rng: &mut ChaCha8Rng) -> Vec<Event> {
    common::random_events(LABEL_FRAMES as u32, N_CLASSES, 3, true, rng)
        .into_iter()
        .map(|e| Event::new(e.frame, e.class_id, e.azimuth_deg.round(), e.distance_m))
        .collect()
}

#[test]
fn rotation_scenarios() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let reference = EventList::new(integer_events(&mut rng));
    let cfg = ScoreConfig::default();
    let exact = score(&reference, &reference, &cfg);
    assert_eq!((exact.f20, exact.doae_deg, exact.rde), (1.0, 0.0, 0.0));
    assert_eq!(exact.tp as usize, reference.len());

    for delta in [1.0, 10.0, 20.0, 25.0] {
        let rotated = EventList::new(
            reference
                .iter()
                .map(|e| ev(e.frame, e.class_id, e.azimuth_deg + delta, e.distance_m))
                .collect(),
        );
        let r = score(&rotated, &reference, &cfg);
        assert_eq!(r.doae_deg, delta);
        assert_eq!(r.rde, 0.0);
        assert_eq!(r.f20, if delta <= 20.0 { 1.0 } else { 0.0 });
        if delta > 20.0 {
            assert_eq!((r.fp as usize, r.fn_ as usize), (reference.len(), reference.len()));
        }
    }
}

#[test]
fn distance_errors_are_relative() {
    let reference = EventList::new(vec![ev(0, 0, 0.0, 2.0), ev(1, 0, 0.0, 4.0)]);
    let pred = EventList::new(vec![ev(0, 0, 0.0, 3.0), ev(1, 0, 0.0, 3.0)]);
    let r = score(&pred, &reference, &ScoreConfig::default());
    assert!((r.rde - (0.5 + 0.25) / 2.0).abs() < 1e-15);
}

#[test]
fn disjoint_classes_never_match() {
    let pred = EventList::new(vec![ev(0, 1, 0.0, 1.0)]);
    let reference = EventList::new(vec![ev(0, 2, 0.0, 1.0)]);
    let r = score(&pred, &reference, &ScoreConfig::default());
    assert_eq!((r.tp, r.fp, r.fn_, r.matched), (0, 1, 1, 0));
    assert_eq!(r.f20, 0.0);
    assert!(r.doae_deg.is_nan() && r.rde.is_nan());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fp_and_fn_swap_with_arguments(s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = EventList::new(common::random_events(10, 4, 3, true, &mut ChaCha8Rng::seed_from_u64(s1)));
        let b = EventList::new(common::random_events(10, 4, 3, true, &mut ChaCha8Rng::seed_from_u64(s2)));
        let cfg = ScoreConfig::default();
        let (ab, ba) = (score(&a, &b, &cfg), score(&b, &a, &cfg));
        prop_assert_eq!(ab.fn_, ba.fp);
        prop_assert_eq!(ab.fp, ba.fn_);
        prop_assert_eq!(ab.tp, ba.tp);
    }

    #[test]
    fn exact_pair_never_lowers_f20(s1 in any::<u64>(), s2 in any::<u64>(), az in -180.0f64..180.0) {
        let a = common::random_events(10, 4, 2, true, &mut ChaCha8Rng::seed_from_u64(s1));
        let b = common::random_events(10, 4, 2, true, &mut ChaCha8Rng::seed_from_u64(s2));
        let cfg = ScoreConfig::default();
        let before = score(&EventList::new(a.clone()), &EventList::new(b.clone()), &cfg).f20;
        // a fresh frame so the extra pair cannot interact with existing cells
        let extra = ev(20, 0, az, 1.0);
        let (mut a2, mut b2) = (a, b);
        a2.push(extra.clone());
        b2.push(extra);
        let after = score(&EventList::new(a2), &EventList::new(b2), &cfg).f20;
        prop_assert!(after >= before);
    }

    #[test]
    fn acs_commutes_with_codec(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = EventList::new(common::random_events(LABEL_FRAMES as u32, N_CLASSES, 3, true, &mut rng));
        let lhs = decode(&encode_task(&acs_transform_labels(&e)).unwrap(), ACTIVITY_THRESHOLD);
        let rhs = acs_transform_labels(&decode(&encode_task(&e).unwrap(), ACTIVITY_THRESHOLD));
        prop_assert_eq!(lhs.len(), rhs.len());
        for (p, q) in lhs.iter().zip(rhs.iter()) {
            prop_assert_eq!((p.frame, p.class_id), (q.frame, q.class_id));
            prop_assert!(angular_error(p.azimuth_deg, q.azimuth_deg) <= 1e-6);
            prop_assert!((p.distance_m - q.distance_m).abs() <= 1e-12);
        }
        let twice = acs_transform_labels(&acs_transform_labels(&e));
        for (p, q) in twice.iter().zip(e.iter()) {
            prop_assert!(angular_error(p.azimuth_deg, q.azimuth_deg) <= 1e-12);
        }
    }
}
