mod common;

use std::collections::BTreeMap;

use lwise_core::dataset::Split;
use lwise_core::difficulty::{
    auc, cross_validated_auc, cscore_for, cscore_proxy, fit_logistic, gt_logits, log_grid, logistic_log_likelihood,
    min_flip_epsilon, min_flip_epsilon_batch, stratified_folds, DifficultyIndex, FlipSearch,
};
use lwise_core::robusttrain::{pgd_attack, AttackConfig, EpochRecord, TrainingHistory};
use lwise_core::synth::{generate, SynthConfig};
use lwise_core::tensornet::{argmax, GuideModel, InputShape, NetworkSpec, Normalization, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn row(id: &str, class: usize, split: Split, logit: f64) -> (String, usize, Split, f64) {
    (id.to_string(), class, split, logit)
}

#[test]
fn ranks_run_from_easiest_to_hardest_within_a_cell() {
    let idx = DifficultyIndex::from_scores(vec![
        row("a", 0, Split::Test, 1.0),
        row("b", 0, Split::Test, 3.0),
        row("c", 0, Split::Test, 2.0),
        row("d", 0, Split::Test, 0.5),
        row("e", 1, Split::Test, -4.0),
    ])
    .unwrap();
    let get = |id| {
        let e = idx.get(id).unwrap();
        (e.rank, e.d)
    };
    assert_eq!(get("b"), (1, 0.25));
    assert_eq!(get("c"), (2, 0.5));
    assert_eq!(get("a"), (3, 0.75));
    assert_eq!(get("d"), (4, 1.0));
    assert_eq!(get("e"), (1, 1.0));
    let cell: Vec<_> = idx.cell(0, Split::Test).iter().map(|e| e.image_id.as_str()).collect();
    assert_eq!(cell, ["b", "c", "a", "d"]);
}

#[test]
fn ties_are_broken_by_image_id() {
    let idx = DifficultyIndex::from_scores(vec![
        row("z", 0, Split::Train, 1.0),
        row("m", 0, Split::Train, 1.0),
        row("a", 0, Split::Train, 1.0),
    ])
    .unwrap();
    assert_eq!(idx.get("a").unwrap().rank, 1);
    assert_eq!(idx.get("m").unwrap().rank, 2);
    assert_eq!(idx.get("z").unwrap().rank, 3);
}

#[test]
fn duplicates_and_non_finite_logits_are_rejected() {
    assert!(DifficultyIndex::from_scores(vec![row("a", 0, Split::Test, 1.0), row("a", 1, Split::Test, 2.0)]).is_err());
    assert!(DifficultyIndex::from_scores(vec![row("a", 0, Split::Test, f64::NAN)]).is_err());
}

proptest! {
    #[test]
    fn ranks_form_a_permutation_per_cell_and_ignore_input_order(
        logits in prop::collection::vec((0usize..3, 0usize..2, -5.0f64..5.0), 1..80),
        seed in 0u64..100,
    ) {
        let rows: Vec<_> = logits
            .iter()
            .enumerate()
            .map(|(i, &(c, s, l))| row(&format!("img{i:03}"), c, [Split::Train, Split::Test][s], (l * 4.0).round() / 4.0))
            .collect();
        let idx = DifficultyIndex::from_scores(rows.clone()).unwrap();
        let mut shuffled = rows;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let again = DifficultyIndex::from_scores(shuffled).unwrap();
        prop_assert_eq!(idx.entries(), again.entries());

        let mut cells: BTreeMap<(usize, Split), Vec<_>> = BTreeMap::new();
        for e in idx.entries() {
            cells.entry((e.class, e.split)).or_default().push(e);
        }
        for members in cells.values() {
            let n = members.len();
            let mut ranks: Vec<usize> = members.iter().map(|e| e.rank).collect();
            ranks.sort();
            prop_assert_eq!(ranks, (1..=n).collect::<Vec<_>>());
            for a in members {
                prop_assert!(a.d > 0.0 && a.d <= 1.0);
                prop_assert!((a.d - a.rank as f64 / n as f64).abs() < 1e-12);
                for b in members {
                    if a.gt_logit > b.gt_logit {
                        prop_assert!(a.rank < b.rank);
                    }
                }
            }
        }
    }
}

#[test]
fn built_index_matches_model_logits_and_survives_csv() {
    let g = common::guides();
    let ds = &g.dataset;
    let idx = DifficultyIndex::build(&g.robust, ds).unwrap();
    assert_eq!(idx.len(), ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    let logits = gt_logits(&g.robust, ds, &all).unwrap();
    for (s, l) in ds.samples.iter().zip(&logits) {
        let e = idx.get(&s.name).unwrap();
        assert_eq!((e.class, e.split), (s.class, s.split));
        assert!((e.gt_logit - l).abs() < 1e-9);
    }
    let mut buf = Vec::new();
    idx.write_csv(&mut buf).unwrap();
    let back = DifficultyIndex::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.entries(), idx.entries());
}

#[test]
fn building_requires_every_class_in_every_split() {
    let mut ds = generate(
        &SynthConfig {
            per_class_train: 3,
            per_class_test: 2,
            ..SynthConfig::default()
        },
        1,
    );
    ds.samples.retain(|s| !(s.split == Split::Test && s.class == 2));
    let model = GuideModel::init(NetworkSpec::desk_scale(4), 0).unwrap();
    assert!(DifficultyIndex::build(&model, &ds).is_err());
}

fn history(rows: &[&[bool]]) -> TrainingHistory {
    TrainingHistory {
        epochs: (0..rows.len())
            .map(|e| EpochRecord {
                epoch: e + 1,
                lr: 0.1,
                loss: 1.0,
                train_accuracy: 0.5,
                val_accuracy: 0.5,
            })
            .collect(),
        image_names: vec!["x".into(), "y".into(), "z".into()],
        correct: rows.iter().map(|r| r.to_vec()).collect(),
    }
}

#[test]
fn cscore_proxy_is_the_first_correct_epoch() {
    let h = history(&[&[false, true, false], &[true, false, false], &[true, true, false]]);
    let c = cscore_proxy(&h).unwrap();
    assert_eq!(c["x"], 2.0);
    assert_eq!(c["y"], 1.0);
    assert_eq!(c["z"], f64::INFINITY);
    assert_eq!(cscore_for(&h, &["y", "x"]).unwrap(), vec![1.0, 2.0]);
    assert!(cscore_for(&h, &["w"]).is_err());
    assert!(cscore_proxy(&history(&[])).is_err());
}

#[test]
fn log_grid_hits_both_ends() {
    let g = log_grid(0.05, 5.0, 17);
    assert_eq!(g.len(), 17);
    assert!((g[0] - 0.05).abs() < 1e-12 && (g[16] - 5.0).abs() < 1e-9);
    assert!((g[8] - 0.5).abs() < 1e-9);
    assert!(g.windows(2).all(|w| w[0] < w[1]));
}

fn linear_model(seed: u64) -> GuideModel {
    GuideModel::init(NetworkSpec::linear(InputShape::new(4, 4, 3), 2), seed)
        .unwrap()
        .with_normalization(Normalization::identity(3))
        .unwrap()
}

#[test]
fn min_flip_matches_the_linear_margin() {
    let search = FlipSearch::default();
    let mut checked = 0;
    for seed in 0..60 {
        let model = linear_model(seed);
        let n = model.input_len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..n).map(|_| rng.random_range(0.4..0.6)).collect();
        // logits are affine, so differences of probes recover the weights
        let mut probes = x.clone();
        for j in 0..n {
            let mut p = x.clone();
            p[j] += 1.0;
            probes.extend(p);
        }
        let l = model.trace(&probes, n + 1).logits().to_vec();
        let label = argmax(&l[..2]);
        let other = 1 - label;
        let margin = (l[label] - l[other]) as f64;
        let diff: Vec<f64> = (0..n)
            .map(|j| ((l[(j + 1) * 2 + other] - l[other]) - (l[(j + 1) * 2 + label] - l[label])) as f64)
            .collect();
        let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        let needed = margin / norm;
        let max_u = diff.iter().map(|d| d.abs() / norm).fold(0.0, f64::max);
        let Some(&want) = search.grid.iter().find(|&&g| g > needed) else {
            continue;
        };
        // stay clear of the pixel box and of grid boundaries
        if want * max_u > 0.35 || search.grid.iter().any(|g| (g - needed).abs() < 1e-3 * g) {
            continue;
        }
        let got = min_flip_epsilon(&model, &Tensor::new(vec![3, 4, 4], x).unwrap(), label, &search).unwrap();
        assert_eq!(got, want, "seed {seed}: margin needs {needed}");
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} usable seeds");
}

#[test]
fn misclassified_images_need_no_budget() {
    let model = linear_model(3);
    let x = Tensor::new(vec![3, 4, 4], vec![0.5; 48]).unwrap();
    let pred = argmax(
        model
            .forward(&x.clone().reshape(vec![1, 3, 4, 4]).unwrap())
            .unwrap()
            .data(),
    );
    assert_eq!(
        min_flip_epsilon(&model, &x, 1 - pred, &FlipSearch::default()).unwrap(),
        0.0
    );
}

#[test]
fn min_flip_is_the_smallest_flipping_grid_budget() {
    let g = common::guides();
    let ds = &g.dataset;
    let idx: Vec<usize> = ds.indices(Split::Test).into_iter().step_by(20).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| ds.samples[i].class).collect();
    let search = FlipSearch::default();
    let eps = min_flip_epsilon_batch(&g.robust, &common::pixels_of(ds, &idx), &labels, &search).unwrap();
    let flips = |i: usize, e: f64| {
        let cfg = AttackConfig {
            epsilon: e,
            steps: search.steps,
            step_size: search.relative_step * e / search.steps as f64,
        };
        let adv = pgd_attack(&g.robust, &ds.image(idx[i]), labels[i], &cfg).unwrap();
        let s = ds.shape;
        g.robust
            .predict(&adv.reshape(vec![1, s.channels, s.height, s.width]).unwrap())
            .unwrap()[0]
            != labels[i]
    };
    for (i, &e) in eps.iter().enumerate() {
        if e == 0.0 || e.is_infinite() {
            continue;
        }
        let pos = search.grid.iter().position(|&g| g == e).unwrap();
        assert!(flips(i, e), "image {i} does not flip at {e}");
        if pos > 0 {
            assert!(!flips(i, search.grid[pos - 1]), "image {i} already flips below {e}");
        }
    }
}

#[test]
fn flip_search_rejects_bad_grids() {
    let model = linear_model(0);
    let x = vec![0.5f32; 48];
    let bad = [
        FlipSearch {
            grid: vec![],
            ..FlipSearch::default()
        },
        FlipSearch {
            grid: vec![1.0, 0.5],
            ..FlipSearch::default()
        },
        FlipSearch {
            grid: vec![0.0, 1.0],
            ..FlipSearch::default()
        },
        FlipSearch {
            steps: 0,
            ..FlipSearch::default()
        },
    ];
    for s in &bad {
        assert!(min_flip_epsilon_batch(&model, &x, &[0], s).is_err());
    }
}

fn logistic_sample(n: usize, b0: f64, b1: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..n {
        let x: f64 = normal.sample(&mut rng);
        let p = 1.0 / (1.0 + (-(b0 + b1 * x)).exp());
        xs.push(vec![x]);
        ys.push(rng.random::<f64>() < p);
    }
    (xs, ys)
}

#[test]
fn logistic_fit_recovers_known_coefficients() {
    let (xs, ys) = logistic_sample(5000, -0.5, 1.2, 1);
    let fit = fit_logistic(&xs, &ys).unwrap();
    assert!(fit.converged);
    assert!((fit.coefficients[0] + 0.5).abs() < 3.0 * fit.standard_errors[0]);
    assert!((fit.coefficients[1] - 1.2).abs() < 3.0 * fit.standard_errors[1]);
    assert!(fit.p_values[1] < 1e-10);
}

#[test]
fn logistic_fit_beats_every_point_of_a_coefficient_grid() {
    let (xs, ys) = logistic_sample(400, 0.3, -0.8, 2);
    let fit = fit_logistic(&xs, &ys).unwrap();
    assert!((fit.log_likelihood - logistic_log_likelihood(&xs, &ys, &fit.coefficients)).abs() < 1e-9);
    let mut best = f64::NEG_INFINITY;
    let mut best_at = (0.0, 0.0);
    for i in -40..=40 {
        for j in -40..=40 {
            let c = [i as f64 * 0.05, j as f64 * 0.05];
            let ll = logistic_log_likelihood(&xs, &ys, &c);
            if ll > best {
                best = ll;
                best_at = (c[0], c[1]);
            }
        }
    }
    assert!(fit.log_likelihood >= best - 1e-9);
    assert!((fit.coefficients[0] - best_at.0).abs() <= 0.05);
    assert!((fit.coefficients[1] - best_at.1).abs() <= 0.05);
}

#[test]
fn an_uninformative_feature_is_not_significant() {
    let mut significant = 0;
    for seed in 0..40 {
        let (xs, ys) = logistic_sample(300, 0.2, 0.0, 100 + seed);
        if fit_logistic(&xs, &ys).unwrap().p_values[1] < 0.05 {
            significant += 1;
        }
    }
    assert!(significant <= 6, "{significant} of 40 null fits significant");
}

#[test]
fn perfect_separation_is_flagged_as_not_converged() {
    let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
    let ys: Vec<bool> = (0..20).map(|i| i >= 10).collect();
    assert!(!fit_logistic(&xs, &ys).unwrap().converged);
}

#[test]
fn logistic_fit_needs_both_labels() {
    let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
    assert!(fit_logistic(&xs, &[true; 10]).is_err());
}

fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    wins / pairs
}

#[test]
fn auc_examples() {
    assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &[false, false, true, true]).unwrap(), 1.0);
    assert_eq!(auc(&[0.1, 0.2, 0.3, 0.4], &[true, true, false, false]).unwrap(), 0.0);
    assert_eq!(auc(&[1.0, 1.0, 1.0], &[true, false, true]).unwrap(), 0.5);
    assert!(auc(&[1.0, 2.0], &[true, true]).is_err());
}

proptest! {
    #[test]
    fn auc_equals_the_pair_count(data in prop::collection::vec((0i32..8, any::<bool>()), 2..60)) {
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((a - pair_count_auc(&scores, &labels)).abs() < 1e-12);
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&neg, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert!((auc(&scores, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }
}

#[test]
fn stratified_folds_balance_both_labels() {
    let labels: Vec<bool> = (0..103).map(|i| i % 3 == 0).collect();
    let folds = stratified_folds(&labels, 10, 4).unwrap();
    for want in [true, false] {
        let mut counts = [0usize; 10];
        for (f, &l) in folds.iter().zip(&labels) {
            if l == want {
                counts[*f] += 1;
            }
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
    }
    assert_eq!(folds, stratified_folds(&labels, 10, 4).unwrap());
}

#[test]
fn cross_validated_auc_reflects_signal_strength() {
    let (xs, ys) = logistic_sample(2000, 0.0, 1.5, 5);
    let strong = cross_validated_auc(&xs, &ys, 10, 0).unwrap().auc;
    let (xs, ys) = logistic_sample(2000, 0.0, 0.0, 6);
    let none = cross_validated_auc(&xs, &ys, 10, 0).unwrap().auc;
    assert!(strong > 0.75, "{strong}");
    assert!((none - 0.5).abs() < 0.06, "{none}");
}
