//! Procedural "textured blob" images for desk-scale experiments.
//!
//! Four classes cross two texture factors: spot layout (a few broad spots vs.
//! many small ones) and stripe period (broad vs. fine). Each image draws a
//! signal strength that scales the contrast of both factors, so images range
//! from crisp to nearly ambiguous.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample, Split};
use crate::tensornet::InputShape;

pub const CLASS_NAMES: [&str; 4] = ["sparse-broad", "sparse-fine", "dense-broad", "dense-fine"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub size: usize,
    /// Range of the per-image signal strength.
    pub min_signal: f64,
    pub max_signal: f64,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            per_class_train: 400,
            per_class_test: 100,
            size: 32,
            min_signal: 0.35,
            max_signal: 1.0,
            noise_sigma: 0.03,
        }
    }
}

/// Generates the full dataset; identical for identical `(config, seed)`.
pub fn generate(config: &SynthConfig, seed: u64) -> Dataset {
    let shape = InputShape::new(config.size, config.size, 3);
    let mut samples = Vec::new();
    for (split, per_class) in [
        (Split::Train, config.per_class_train),
        (Split::Test, config.per_class_test),
    ] {
        for (class, class_name) in CLASS_NAMES.iter().enumerate() {
            for i in 0..per_class {
                let stream = ((split as u64) << 40) ^ ((class as u64) << 32) ^ i as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream);
                let signal = rng.random_range(config.min_signal..=config.max_signal);
                samples.push(Sample {
                    name: format!("{split}/{class_name}/{i:04}"),
                    class,
                    split,
                    pixels: render(class, signal, config, &mut rng),
                });
            }
        }
    }
    Dataset {
        shape,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        samples,
    }
}

fn render(class: usize, signal: f64, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = cfg.size;
    let dense = class >= 2;
    let fine = class % 2 == 1;
    let base: [f64; 3] = [
        rng.random_range(0.35..0.65),
        rng.random_range(0.35..0.65),
        rng.random_range(0.35..0.65),
    ];
    let tint: [f64; 3] = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];

    let period = if fine {
        rng.random_range(3.0..4.0)
    } else {
        rng.random_range(7.0..9.0)
    };
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let stripe_amp = 0.14 * signal;

    let (count, radius) = if dense {
        (rng.random_range(18..=24), rng.random_range(1.3..1.7))
    } else {
        (rng.random_range(2..=3), rng.random_range(4.5..5.5))
    };
    let spot_sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let spot_amp = 0.6 * signal * spot_sign;
    let spots: Vec<(f64, f64)> = (0..count)
        .map(|_| {
            (
                rng.random_range(3.0..n as f64 - 3.0),
                rng.random_range(3.0..n as f64 - 3.0),
            )
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
    let (dx, dy) = (theta.cos(), theta.sin());
    let plane = n * n;
    let mut out = vec![0f32; 3 * plane];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let stripe = stripe_amp * (std::f64::consts::TAU * (fx * dx + fy * dy) / period + phase).sin();
            let spot: f64 = spots
                .iter()
                .map(|&(cx, cy)| {
                    let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
                    (radius + 0.5 - d).clamp(0.0, 1.0)
                })
                .fold(0.0, f64::max);
            for c in 0..3 {
                let v = base[c]
                    + stripe * (1.0 + 0.3 * tint[c])
                    + spot_amp * spot * (1.0 + 0.2 * tint[c])
                    + noise.sample(rng);
                out[c * plane + y * n + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Shapes used for attention-check trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckShape {
    Circle,
    Triangle,
}

impl CheckShape {
    pub fn label(&self) -> &'static str {
        match self {
            CheckShape::Circle => "circle",
            CheckShape::Triangle => "triangle",
        }
    }
}

/// Dark outline-free filled shape on a light background.
pub fn attention_image(shape: CheckShape, size: usize) -> Vec<f32> {
    let plane = size * size;
    let mut out = vec![0.92f32; 3 * plane];
    let c = size as f64 / 2.0;
    let r = size as f64 * 0.35;
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
            let inside = match shape {
                CheckShape::Circle => fx * fx + fy * fy <= r * r,
                CheckShape::Triangle => {
                    // apex up, base at +r/2
                    let t = (fy + r) / (1.5 * r);
                    (0.0..=1.0).contains(&t) && fx.abs() <= t * r * 0.9
                }
            };
            if inside {
                for ch in 0..3 {
                    out[ch * plane + y * size + x] = 0.1;
                }
            }
        }
    }
    out
}
