use lwise_core::curriculum::Variant;
use lwise_core::statlab::{
    binom_pmf, binom_tail_geq, bootstrap_ci, bootstrap_mean_difference, chisq_2x2, learning_curve, mean,
    participant_median_chisq, pooled_trial_chisq, quantile_sorted, summarize, OutcomeTable, ParticipantOutcome,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::function::erf::erfc;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn chi_square_matches_the_closed_form() {
    let r = chisq_2x2(10, 20, 30, 40).unwrap();
    assert!(close(
        r.statistic,
        100.0 * 200.0f64.powi(2) / (30.0 * 70.0 * 40.0 * 60.0),
        1e-12
    ));
    assert!(close(r.p, erfc((r.statistic / 2.0).sqrt()), 1e-9));
    assert!(close(r.statistic, 0.793_650_793_650_793_6, 1e-12));
    assert!(close(r.p, 0.372_998_5, 1e-6));

    let r = chisq_2x2(12, 5, 7, 15).unwrap();
    assert!(close(
        r.statistic,
        39.0 * 145.0f64.powi(2) / (17.0 * 22.0 * 19.0 * 20.0),
        1e-12
    ));
    assert!(close(r.p, erfc((r.statistic / 2.0).sqrt()), 1e-9));
    assert!(r.p < 0.05);
}

#[test]
fn chi_square_reference_tables() {
    let r = chisq_2x2(10, 10, 10, 10).unwrap();
    assert_eq!((r.statistic, r.p), (0.0, 1.0));
    let r = chisq_2x2(20, 5, 5, 20).unwrap();
    assert!(close(r.statistic, 18.0, 1e-12));
    assert!(close(r.p, erfc(3.0), 1e-9));
    assert!(close(r.p, 2.209_049_7e-5, 1e-6));
}

proptest! {
    #[test]
    fn chi_square_p_falls_as_the_table_moves_off_independence(m in 10u64..100, shift in 0u64..9) {
        let n = m / 10;
        let a = chisq_2x2(m + shift * n, m - shift * n, m - shift * n, m + shift * n).unwrap();
        let b = chisq_2x2(m + (shift + 1) * n, m - (shift + 1) * n, m - (shift + 1) * n, m + (shift + 1) * n).unwrap();
        prop_assert!(b.p <= a.p);
        prop_assert!(b.statistic >= a.statistic);
    }
}

#[test]
fn chi_square_of_proportional_rows_is_zero() {
    let r = chisq_2x2(10, 30, 20, 60).unwrap();
    assert!(r.statistic.abs() < 1e-12);
    assert!(close(r.p, 1.0, 1e-12));
}

#[test]
fn chi_square_rejects_empty_margins() {
    assert!(chisq_2x2(0, 0, 3, 4).is_err());
    assert!(chisq_2x2(0, 3, 0, 4).is_err());
}

proptest! {
    #[test]
    fn chi_square_is_symmetric(a in 1u64..200, b in 1u64..200, c in 1u64..200, d in 1u64..200) {
        let base = chisq_2x2(a, b, c, d).unwrap();
        for other in [chisq_2x2(c, d, a, b), chisq_2x2(b, a, d, c), chisq_2x2(a, c, b, d)] {
            let o = other.unwrap();
            prop_assert!(close(o.statistic, base.statistic, 1e-9 * base.statistic.max(1.0)));
            prop_assert!(close(o.p, base.p, 1e-9));
        }
        prop_assert!((0.0..=1.0).contains(&base.p));
    }

    #[test]
    fn binomial_tail_and_body_sum_to_one(n in 1u64..60, frac in 0.0f64..1.0, p in 0.0f64..=1.0) {
        let d = ((n as f64) * frac) as u64;
        let body: f64 = (0..d).map(|k| binom_pmf(n, k, p)).sum();
        prop_assert!(close(binom_tail_geq(n, d, p).unwrap() + body, 1.0, 1e-12));
    }

    #[test]
    fn learning_curve_of_constant_sequences_is_flat(v in 0.0f64..1.0, len in 1usize..40, w in 0usize..8) {
        let c = learning_curve(&[vec![v; len], vec![v; len]], 2 * w + 1).unwrap();
        prop_assert!(c.mean.iter().all(|m| close(*m, v, 1e-12)));
        prop_assert!(c.sem.iter().all(|s| s.abs() < 1e-12));
    }
}

#[test]
fn binomial_tail_matches_direct_summation() {
    let p: f64 = 2.0 / 7.0;
    let choose = |n: u64, k: u64| (1..=k).fold(1.0, |acc, i| acc * (n - k + i) as f64 / i as f64);
    let direct: f64 = (6..=9)
        .map(|k| choose(9, k) * p.powi(k as i32) * (1.0 - p).powi(9 - k as i32))
        .sum();
    let tail = binom_tail_geq(9, 6, p).unwrap();
    assert!(close(tail, direct, 1e-14));
    assert!(close(tail, 799_232.0 / 40_353_607.0, 1e-14));
    assert!(tail < 0.05);
    assert_eq!(binom_tail_geq(9, 0, p).unwrap(), 1.0);
    let fair = binom_tail_geq(9, 6, 0.5).unwrap();
    assert!(close(fair, 130.0 / 512.0, 1e-12));
    assert!(close(fair, 0.2539, 1e-4));
    assert!(close(binom_tail_geq(10, 10, 0.5).unwrap(), 1.0 / 1024.0, 1e-15));
    assert!(binom_tail_geq(3, 4, 0.5).is_err());
    assert!(binom_tail_geq(3, 1, 1.5).is_err());
}

#[test]
fn bootstrap_of_a_constant_sample_is_degenerate() {
    let ci = bootstrap_ci(&[0.7; 30], mean, 500, 0.95, 1).unwrap();
    assert!(close(ci.estimate, 0.7, 1e-12));
    assert!(ci.width() < 1e-12);
}

#[test]
fn bootstrap_is_deterministic_and_seed_dependent() {
    let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
    let a = bootstrap_ci(&xs, mean, 1000, 0.95, 5).unwrap();
    assert_eq!(a, bootstrap_ci(&xs, mean, 1000, 0.95, 5).unwrap());
    assert_ne!(a, bootstrap_ci(&xs, mean, 1000, 0.95, 6).unwrap());
    assert!(a.contains(a.estimate));
    assert!(bootstrap_ci(&xs, mean, 1000, 1.0, 5).is_err());
    assert!(bootstrap_ci(&[1.0], mean, 1000, 0.95, 5).is_err());
}

#[test]
fn bootstrap_interval_narrows_like_root_n_and_covers() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let small: Vec<f64> = (0..100).map(|_| normal.sample(&mut rng)).collect();
    let large: Vec<f64> = (0..1600).map(|_| normal.sample(&mut rng)).collect();
    let ws = bootstrap_ci(&small, mean, 2000, 0.95, 0).unwrap().width();
    let wl = bootstrap_ci(&large, mean, 2000, 0.95, 0).unwrap().width();
    assert!(close(ws / wl, 4.0, 1.0), "width ratio {}", ws / wl);
    assert!(close(wl, 2.0 * 1.96 / 40.0, 0.02));

    for seed in 0..50 {
        let xs: Vec<f64> = (0..100).map(|_| normal.sample(&mut rng)).collect();
        let w = bootstrap_ci(&xs, mean, 2000, 0.95, seed).unwrap().width();
        assert!(close(w / (2.0 * 1.96 / 10.0), 1.0, 0.2), "seed {seed} width {w}");
    }

    let mut covered = 0;
    for s in 0..200 {
        let xs: Vec<f64> = (0..60).map(|_| normal.sample(&mut rng)).collect();
        if bootstrap_ci(&xs, mean, 1000, 0.95, s).unwrap().contains(0.0) {
            covered += 1;
        }
    }
    assert!((175..=199).contains(&covered), "coverage {covered}/200");
}

#[test]
fn mean_difference_interval_separates_shifted_groups() {
    let normal = Normal::new(0.0, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a: Vec<f64> = (0..200).map(|_| 0.6 + normal.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..200).map(|_| 0.5 + normal.sample(&mut rng)).collect();
    let ci = bootstrap_mean_difference(&a, &b, 5000, 0.95, 0).unwrap();
    assert!(close(ci.estimate, mean(&a) - mean(&b), 1e-12));
    assert!(ci.lo > 0.0 && ci.contains(0.1));
}

#[test]
fn quantiles_interpolate_linearly() {
    let v = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(quantile_sorted(&v, 0.0), 1.0);
    assert_eq!(quantile_sorted(&v, 1.0), 4.0);
    assert_eq!(quantile_sorted(&v, 0.5), 2.5);
    assert!(close(quantile_sorted(&v, 0.25), 1.75, 1e-12));
}

#[test]
fn learning_curve_examples() {
    let c = learning_curve(&[vec![1.0, 0.0, 1.0, 0.0, 1.0]], 3).unwrap();
    let want = [0.5, 2.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 0.5];
    for (a, b) in c.mean.iter().zip(want) {
        assert!(close(*a, b, 1e-12));
    }
    assert!(c.sem.iter().all(|&s| s == 0.0));

    let c = learning_curve(&[vec![1.0, 1.0], vec![0.0, 0.0]], 1).unwrap();
    assert_eq!(c.mean, vec![0.5, 0.5]);
    assert!(close(c.sem[0], 0.5, 1e-12));

    let step: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { 1.0 }).collect();
    let c = learning_curve(&[step.clone()], 5).unwrap();
    let ramp: Vec<usize> = (0..20).filter(|&i| c.mean[i] > 0.0 && c.mean[i] < 1.0).collect();
    assert_eq!(ramp, vec![8, 9, 10, 11]);
    assert_eq!(learning_curve(&[step.clone()], 1).unwrap().mean, step);

    assert!(learning_curve(&[vec![1.0]], 4).is_err());
    assert!(learning_curve(&[vec![1.0], vec![1.0, 0.0]], 3).is_err());
    assert!(learning_curve(&[], 3).is_err());
}

fn outcome(id: &str, v: Variant, correct: &[[u32; 2]; 2], timeouts: u32) -> ParticipantOutcome {
    let total: u32 = correct.iter().flatten().sum::<u32>() + timeouts;
    let hits = correct[0][0] + correct[1][1];
    let mut seq: Vec<bool> = (0..total).map(|i| i < hits).collect();
    seq.rotate_left(1);
    ParticipantOutcome {
        participant_id: id.into(),
        variant: v,
        test_accuracy: hits as f64 / total as f64,
        training_minutes: 10.0,
        confusion: correct.iter().map(|r| r.to_vec()).collect(),
        test_timeouts: timeouts,
        train_sequence: vec![true, false, true],
        test_sequence: seq,
    }
}

fn table() -> OutcomeTable {
    // CONTROL at 0.47 and LWISE at 0.60 over 100 test trials each
    let mut rows = Vec::new();
    for i in 0..4 {
        rows.push(outcome(&format!("c{i}"), Variant::Control, &[[24, 26], [27, 23]], 0));
        rows.push(outcome(&format!("l{i}"), Variant::Lwise, &[[30, 20], [20, 30]], 0));
    }
    OutcomeTable {
        task_classes: vec![0, 1],
        rows,
    }
}

#[test]
fn summary_reports_margins_and_relative_gain() {
    let s = summarize(&table(), 0.25, 500, 0).unwrap();
    let control = &s.variants[&Variant::Control];
    let lwise = &s.variants[&Variant::Lwise];
    assert!(close(control.mean_accuracy.estimate, 0.47, 1e-12));
    assert!(close(lwise.margin, 0.35, 1e-12));
    assert!(close(lwise.relative_margin_gain.unwrap(), 0.13 / 0.22, 1e-12));
    assert_eq!(format!("{:.1}", 100.0 * lwise.relative_margin_gain.unwrap()), "59.1");
    assert_eq!(control.relative_margin_gain, Some(0.0));
    assert_eq!(lwise.participants, 4);

    let p0 = lwise.per_class[0].precision.unwrap();
    let r0 = lwise.per_class[0].recall.unwrap();
    assert!(close(p0.estimate, 0.6, 1e-12) && close(r0.estimate, 0.6, 1e-12));
    let p1 = control.per_class[1].precision.unwrap();
    assert!(close(p1.estimate, 23.0 / 49.0, 1e-12));
    assert!(close(control.per_class[0].recall.unwrap().estimate, 0.48, 1e-12));
}

#[test]
fn always_choosing_one_class_leaves_other_precisions_absent() {
    let mut t = table();
    t.rows.push(outcome("z", Variant::Et, &[[30, 0], [20, 0]], 0));
    t.rows.push(outcome("y", Variant::Et, &[[25, 0], [25, 0]], 0));
    let s = summarize(&t, 0.25, 200, 0).unwrap();
    let et = &s.variants[&Variant::Et];
    assert!(close(et.per_class[0].recall.unwrap().estimate, 1.0, 1e-12));
    assert!(close(et.per_class[0].precision.unwrap().estimate, 55.0 / 100.0, 1e-12));
    assert!(close(et.per_class[1].recall.unwrap().estimate, 0.0, 1e-12));
    assert_eq!(et.per_class[1].precision, None);
}

#[test]
fn every_interval_contains_its_estimate() {
    let mut t = table();
    t.rows[0].test_sequence[0] = true;
    t.rows[0].test_accuracy = 0.48;
    let s = summarize(&t, 0.25, 300, 2).unwrap();
    for v in s.variants.values() {
        assert!(v.mean_accuracy.contains(v.mean_accuracy.estimate));
        for c in &v.per_class {
            for i in [c.precision, c.recall].into_iter().flatten() {
                assert!(i.contains(i.estimate));
            }
        }
    }
}

#[test]
fn summary_needs_a_control_group_and_consistent_rows() {
    let mut t = table();
    t.rows.retain(|r| r.variant != Variant::Control);
    assert!(summarize(&t, 0.25, 10, 0).is_err());
    let mut t = table();
    t.rows[0].test_sequence.pop();
    assert!(summarize(&t, 0.25, 10, 0).is_err());
}

#[test]
fn relative_gain_is_absent_without_a_positive_control_margin() {
    let s = summarize(&table(), 0.5, 10, 0).unwrap();
    assert_eq!(s.variants[&Variant::Lwise].relative_margin_gain, None);
}

#[test]
fn summary_does_not_depend_on_row_order() {
    let t = table();
    let base = summarize(&t, 0.25, 300, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let mut s = t.clone();
        s.rows.shuffle(&mut rng);
        assert_eq!(summarize(&s, 0.25, 300, 9).unwrap(), base);
    }
}

#[test]
fn outcome_table_round_trips_through_csv() {
    let mut t = table();
    t.rows[1].test_timeouts = 2;
    t.rows[1].test_sequence.extend([false, false]);
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    let back = OutcomeTable::read_csv(buf.as_slice(), vec![0, 1]).unwrap();
    assert_eq!(back, t);
}

#[test]
fn group_tests_compare_pooled_trials_and_median_splits() {
    let t = table();
    let pooled = pooled_trial_chisq(&t, Variant::Lwise, Variant::Control).unwrap();
    let direct = chisq_2x2(240, 160, 188, 212).unwrap();
    assert_eq!(pooled, direct);
    assert!(pooled.p < 0.001);
    let med = participant_median_chisq(&t, Variant::Lwise, Variant::Control).unwrap();
    assert_eq!(med, chisq_2x2(4, 0, 0, 4).unwrap());
}
