use lwise_core::tensornet::{
    Batch, GuideModel, InputShape, LayerSpec, Network, NetworkSpec, Normalization, Objective, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_conv_spec() -> NetworkSpec {
    NetworkSpec {
        input_shape: InputShape::new(8, 8, 3),
        layers: vec![
            LayerSpec::Conv {
                channels: 4,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::AvgPool { size: 2 },
            LayerSpec::Conv {
                channels: 5,
                kernel: 2,
                stride: 1,
                padding: 0,
            },
            LayerSpec::Relu,
            LayerSpec::Dense { width: 3 },
        ],
        class_count: 3,
    }
}

fn two_layer_spec() -> NetworkSpec {
    NetworkSpec {
        input_shape: InputShape::new(6, 6, 2),
        layers: vec![
            LayerSpec::Conv {
                channels: 3,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Dense { width: 4 },
        ],
        class_count: 4,
    }
}

fn random_image(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(0.0..1.0)).collect()
}

fn normalized<T: lwise_core::tensornet::Scalar>(net: Network<T>, seed: u64) -> Network<T> {
    let c = net.spec().input_shape.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let norm = Normalization {
        mean: (0..c).map(|_| rng.random_range(0.2..0.6)).collect(),
        std: (0..c).map(|_| rng.random_range(0.2..0.5)).collect(),
    };
    net.with_normalization(norm).unwrap()
}

#[test]
fn zero_network_gives_zero_logits() {
    let net = GuideModel::zeros(NetworkSpec::desk_scale(4)).unwrap();
    let image = Tensor::new(vec![3, 32, 32], vec![0.37; 3 * 32 * 32]).unwrap();
    let logits = net.forward(&image).unwrap();
    assert_eq!(logits.shape(), &[1, 4]);
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_dense_layer_passes_pixels_through() {
    let spec = NetworkSpec::linear(InputShape::new(1, 2, 1), 2);
    let net = GuideModel::from_parts(spec, Normalization::identity(1), vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let image = Tensor::new(vec![1, 1, 2], vec![0.3, 0.7]).unwrap();
    let logits = net.forward(&image).unwrap();
    assert_eq!(logits.data(), &[0.3, 0.7]);
}

#[test]
fn shape_mismatch_names_expected_and_actual() {
    let net = GuideModel::zeros(NetworkSpec::desk_scale(4)).unwrap();
    let image = Tensor::new(vec![3, 16, 16], vec![0.0; 768]).unwrap();
    let err = net.forward(&image).unwrap_err().to_string();
    assert!(err.contains("[3, 32, 32]") && err.contains("[3, 16, 16]"), "{err}");
}

/// Straight-line scalar reimplementation of conv(3x3, s2, p1) -> relu -> dense.
fn scalar_loop_logits(net: &Network<f64>, x: &[f64]) -> Vec<f64> {
    let (c_in, h, w) = (2usize, 6usize, 6usize);
    let (c_out, k, s, p) = (3usize, 3usize, 2usize, 1isize);
    let (oh, ow) = (3usize, 3usize);
    let wts = net.weights();
    let norm = net.normalization();
    let xn = |c: usize, y: usize, xx: usize| (x[(c * h + y) * w + xx] - norm.mean[c]) / norm.std[c];
    let conv_w = &wts[..c_out * c_in * k * k];
    let conv_b = &wts[c_out * c_in * k * k..c_out * c_in * k * k + c_out];
    let mut hidden = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = conv_b[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * s + ky) as isize - p;
                            let ix = (xx * s + kx) as isize - p;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += conv_w[((o * c_in + c) * k + ky) * k + kx] * xn(c, iy as usize, ix as usize);
                            }
                        }
                    }
                }
                hidden[(o * oh + y) * ow + xx] = acc.max(0.0);
            }
        }
    }
    let off = c_out * c_in * k * k + c_out;
    let n_in = hidden.len();
    (0..4)
        .map(|j| {
            let row = &wts[off + j * n_in..off + (j + 1) * n_in];
            let b = wts[off + 4 * n_in + j];
            b + row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

#[test]
fn forward_matches_scalar_loop_oracle() {
    for seed in 0..5 {
        let net = normalized(Network::<f64>::init(two_layer_spec(), seed).unwrap(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random_image(72, &mut rng);
        let want = scalar_loop_logits(&net, &x);
        let got = net.forward(&Tensor::new(vec![2, 6, 6], x.clone()).unwrap()).unwrap();
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "seed {seed}: {g} vs {w}");
        }
        // single precision agrees too
        let got32 = net
            .cast::<f32>()
            .forward(&Tensor::new(vec![2, 6, 6], x.iter().map(|&v| v as f32).collect()).unwrap())
            .unwrap();
        for (g, w) in got32.data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-4);
        }
    }
}

#[test]
fn forward_is_bitwise_pure_and_thread_safe() {
    let net = GuideModel::init(NetworkSpec::desk_scale(4), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f32> = (0..2 * 3072).map(|_| rng.random()).collect();
    let images = Tensor::new(vec![2, 3, 32, 32], x).unwrap();
    let first = net.forward(&images).unwrap();
    let parallel: Vec<Tensor<f32>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4).map(|_| s.spawn(|| net.forward(&images).unwrap())).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for out in parallel {
        assert_eq!(out.data(), first.data());
    }
    assert_eq!(net.forward(&images).unwrap().data(), first.data());
}

#[test]
fn linear_model_gt_logit_gradient_is_weight_row() {
    let shape = InputShape::new(2, 2, 1);
    let net = GuideModel::init(NetworkSpec::linear(shape, 3), 4).unwrap();
    let image = Tensor::new(vec![1, 2, 2], vec![0.1, 0.5, 0.9, 0.3]).unwrap();
    for gt in 0..3 {
        let g = net.input_gradient(&image, &Objective::gt_logit(gt)).unwrap();
        assert_eq!(g.data(), &net.weights()[gt * 4..(gt + 1) * 4]);
    }
    let err = net.input_gradient(&image, &Objective::gt_logit(3)).unwrap_err();
    assert!(matches!(err, lwise_core::Error::InvalidClass { index: 3, classes: 3 }));
}

#[test]
fn margin_gradient_is_linear_combination_of_class_gradients() {
    let net = normalized(Network::<f64>::init(small_conv_spec(), 2).unwrap(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let image = Tensor::new(vec![3, 8, 8], random_image(192, &mut rng)).unwrap();
    let per: Vec<Tensor<f64>> = (0..3)
        .map(|c| net.input_gradient(&image, &Objective::gt_logit(c)).unwrap())
        .collect();
    let alpha = 0.8;
    let combined = net
        .input_gradient(
            &image,
            &Objective::GtMargin {
                gt: 1,
                alpha,
                classes: None,
            },
        )
        .unwrap();
    for i in 0..192 {
        let want = per[1].data()[i] - alpha / 2.0 * (per[0].data()[i] + per[2].data()[i]);
        assert!((combined.data()[i] - want).abs() < 1e-12);
    }
}

/// Central-difference check. Elements whose stencil changes the rectifier
/// pattern straddle a kink, where finite differences are meaningless; they are
/// counted and skipped.
fn check_gradient(f: impl Fn(&[f64]) -> (f64, Vec<bool>), x: &[f64], analytic: &[f64], h: f64) -> (usize, usize) {
    let mut kinks = 0;
    let mut checked = 0;
    let (_, pattern) = f(x);
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let (fp, pp) = f(&xp);
        xp[i] = x[i] - h;
        let (fm, pm) = f(&xp);
        xp[i] = x[i];
        if pp != pattern || pm != pattern {
            kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        let rel = if scale < 1e-8 {
            (a - numeric).abs()
        } else {
            (a - numeric).abs() / scale
        };
        assert!(rel < 1e-4, "element {i}: analytic {a} numeric {numeric} rel {rel}");
        checked += 1;
    }
    (checked, kinks)
}

#[test]
fn input_gradients_match_central_differences_over_20_seeds() {
    let start = std::time::Instant::now();
    let mut kinks = 0;
    let mut checked = 0;
    for seed in 0..20u64 {
        for spec in [small_conv_spec(), two_layer_spec()] {
            let net = normalized(Network::<f64>::init(spec.clone(), seed).unwrap(), seed);
            let len = spec.input_shape.len();
            let s = spec.input_shape;
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = random_image(len, &mut rng);
            let gt = (seed as usize) % spec.class_count;
            for objective in [
                Objective::gt_logit(gt),
                Objective::GtMargin {
                    gt,
                    alpha: 1.0,
                    classes: None,
                },
                Objective::CrossEntropy { gt },
            ] {
                let image = Tensor::new(vec![s.channels, s.height, s.width], x.clone()).unwrap();
                let g = net.input_gradient(&image, &objective).unwrap();
                let f = |p: &[f64]| {
                    let trace = net.trace(p, 1);
                    (
                        objective.value_and_grad(trace.logits()).0,
                        net.rectifier_pattern(&trace),
                    )
                };
                let (c, k) = check_gradient(f, &x, g.data(), 1e-5);
                checked += c;
                kinks += k;
            }
        }
    }
    assert!(kinks * 100 < checked, "{kinks} kink crossings out of {checked}");
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn weight_gradients_match_central_differences() {
    for seed in 0..20u64 {
        let spec = small_conv_spec();
        let net = normalized(Network::<f64>::init(spec.clone(), seed).unwrap(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 55);
        let batch = 3;
        let x = random_image(batch * spec.input_shape.len(), &mut rng);
        let labels: Vec<usize> = (0..batch).map(|i| (i + seed as usize) % 3).collect();
        let loss = |n: &Network<f64>| -> (f64, Vec<bool>) {
            let trace = n.trace(&x, batch);
            let value = labels
                .iter()
                .enumerate()
                .map(|(i, &y)| Objective::CrossEntropy { gt: y }.value_and_grad(trace.logits_row(i)).0)
                .sum();
            (value, n.rectifier_pattern(&trace))
        };
        let trace = net.trace(&x, batch);
        let mut d_logits = Vec::new();
        for (i, &y) in labels.iter().enumerate() {
            d_logits.extend(Objective::CrossEntropy { gt: y }.value_and_grad(trace.logits_row(i)).1);
        }
        let mut grad = vec![0.0; net.weights().len()];
        net.backward(&trace, &d_logits, Some(&mut grad), false);
        let w0 = net.weights().to_vec();
        let f = |w: &[f64]| {
            let mut n = net.clone();
            n.weights_mut().copy_from_slice(w);
            loss(&n)
        };
        let (checked, kinks) = check_gradient(f, &w0, &grad, 1e-5);
        assert!(kinks * 50 <= checked, "seed {seed}: {kinks} kinks / {checked}");
    }
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let mut net = GuideModel::init(NetworkSpec::desk_scale(4), 1).unwrap();
    let before = net.weights().to_vec();
    let pixels = vec![0.5f32; 2 * 3072];
    let report = net.sgd_step(&pixels, &[0, 3], 0.0, 1e-4).unwrap();
    assert_eq!(report.correct.len(), 2);
    assert_eq!(net.weights(), before.as_slice());
}

#[test]
fn single_sgd_step_matches_hand_computation() {
    let shape = InputShape::new(1, 3, 1);
    let mut net = Network::<f64>::init(NetworkSpec::linear(shape, 2), 5).unwrap();
    let w = net.weights().to_vec();
    let x = [0.2, -0.4, 0.9];
    let y = 1;
    let lr = 0.1;
    let logits: Vec<f64> = (0..2)
        .map(|j| w[6 + j] + (0..3).map(|i| w[j * 3 + i] * x[i]).sum::<f64>())
        .collect();
    let z = logits[0].exp() + logits[1].exp();
    let p = [logits[0].exp() / z, logits[1].exp() / z];
    let err = [p[0] - (y == 0) as u8 as f64, p[1] - (y == 1) as u8 as f64];
    net.sgd_step(&x, &[y], lr, 0.0).unwrap();
    for j in 0..2 {
        for i in 0..3 {
            let want = w[j * 3 + i] - lr * err[j] * x[i];
            assert!((net.weights()[j * 3 + i] - want).abs() < 1e-12);
        }
        assert!((net.weights()[6 + j] - (w[6 + j] - lr * err[j])).abs() < 1e-12);
    }
}

fn blobs(n: usize, seed: u64) -> (Vec<f32>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let label = i % 2;
        let centre = if label == 0 { 0.3 } else { 0.7 };
        for _ in 0..4 {
            x.push(centre + rng.random_range(-0.12f32..0.12));
        }
        y.push(label);
    }
    (x, y)
}

#[test]
fn separable_blobs_are_learned() {
    let (x, y) = blobs(200, 3);
    // Independent oracle: a plain logistic regression by gradient descent
    // separates the data, so the trainer has something to find.
    let mut w = [0.0f64; 5];
    for _ in 0..3000 {
        let mut g = [0.0; 5];
        for (row, &label) in x.chunks(4).zip(&y) {
            let z = w[4] + (0..4).map(|i| w[i] * row[i] as f64).sum::<f64>();
            let e = 1.0 / (1.0 + (-z).exp()) - label as f64;
            for i in 0..4 {
                g[i] += e * row[i] as f64;
            }
            g[4] += e;
        }
        for i in 0..5 {
            w[i] -= 0.5 * g[i] / 200.0;
        }
    }
    let oracle_acc = x
        .chunks(4)
        .zip(&y)
        .filter(|(row, &label)| {
            let z = w[4] + (0..4).map(|i| w[i] * row[i] as f64).sum::<f64>();
            (z > 0.0) as usize == label
        })
        .count() as f64
        / 200.0;
    assert!(oracle_acc >= 0.99);

    let mut net = GuideModel::init(NetworkSpec::linear(InputShape::new(2, 2, 1), 2), 0).unwrap();
    let batches: Vec<Batch<f32>> = (0..200)
        .step_by(20)
        .map(|s| Batch {
            pixels: x[s * 4..(s + 20) * 4].to_vec(),
            labels: y[s..s + 20].to_vec(),
            ids: (s..s + 20).collect(),
        })
        .collect();
    let mut last = None;
    for _ in 0..50 {
        last = Some(net.sgd_epoch(&batches, 0.5, 0.0).unwrap());
    }
    let preds = net
        .predict(&Tensor::new(vec![200, 1, 2, 2], x.clone()).unwrap())
        .unwrap();
    let acc = preds.iter().zip(&y).filter(|(p, t)| p == t).count() as f64 / 200.0;
    assert!(acc >= 0.99, "train accuracy {acc}");
    assert_eq!(last.unwrap().correct.len(), 200);
}

#[test]
fn small_steps_do_not_increase_convex_loss() {
    let (x, y) = blobs(64, 11);
    let mut net = Network::<f64>::init(NetworkSpec::linear(InputShape::new(2, 2, 1), 2), 2).unwrap();
    let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let mut prev = f64::INFINITY;
    for step in 0..40 {
        let lr = 0.05 / (1.0 + step as f64);
        let report = net.sgd_step(&xd, &y, lr, 0.0).unwrap();
        assert!(report.loss <= prev + 1e-12, "loss rose at step {step}");
        prev = report.loss;
    }
}

#[test]
fn non_finite_loss_aborts_with_batch_index() {
    let mut net = GuideModel::init(NetworkSpec::linear(InputShape::new(1, 2, 1), 2), 0).unwrap();
    net.weights_mut()[0] = f32::INFINITY;
    let batches = vec![Batch {
        pixels: vec![1.0, 1.0],
        labels: vec![0],
        ids: vec![0],
    }];
    let err = net.sgd_epoch(&batches, 0.1, 0.0).unwrap_err();
    assert!(matches!(err, lwise_core::Error::NonFiniteLoss { batch: 0 }), "{err}");
}
