//! L2 PGD attacks and (adversarial) minibatch training of guide models.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::enhance::projection::ascent_step;
use crate::error::{Error, Result};
use crate::tensornet::{argmax, Batch, GuideModel, NetworkSpec, Normalization, Objective, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L2 budget in raw `[0, 1]` pixel units.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl AttackConfig {
    pub fn desk_scale() -> Self {
        AttackConfig {
            epsilon: 1.0,
            steps: 7,
            step_size: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "attack epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::invalid("attack needs at least one step"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::invalid("attack step size must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    /// Learning rate is multiplied by this every `lr_decay_interval` epochs.
    pub lr_decay_factor: f64,
    pub lr_decay_interval: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub attack: Option<AttackConfig>,
}

impl TrainConfig {
    pub fn desk_scale_robust() -> Self {
        TrainConfig {
            attack: Some(AttackConfig::desk_scale()),
            ..TrainConfig::desk_scale_vanilla()
        }
    }

    /// Adversarial fine-tuning of an already trained vanilla model: 20 epochs
    /// from a learning rate of 0.01. Training adversarially from a random
    /// initialisation at this budget tends to collapse to a constant predictor.
    pub fn desk_scale_finetune() -> Self {
        TrainConfig {
            epochs: 20,
            base_lr: 0.01,
            ..TrainConfig::desk_scale_robust()
        }
    }

    pub fn desk_scale_vanilla() -> Self {
        TrainConfig {
            epochs: 30,
            base_lr: 0.05,
            lr_decay_factor: 0.5,
            lr_decay_interval: 10,
            batch_size: 64,
            weight_decay: 1e-4,
            attack: None,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = if self.lr_decay_interval == 0 {
            0
        } else {
            epoch / self.lr_decay_interval
        };
        self.base_lr * self.lr_decay_factor.powi(steps as i32)
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::invalid("base_lr must be > 0"));
        }
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        Ok(())
    }
}

/// Result of attacking a batch: the adversarial pixels and the logits the
/// model produced on the clean inputs.
pub struct AttackOutput {
    pub adversarial: Vec<f32>,
    pub clean_logits: Vec<f32>,
}

/// L2 PGD maximising cross-entropy against `label`.
///
/// Each step moves `step_size` along the normalised gradient, projects the
/// perturbation onto the `epsilon` ball, then clamps pixels to `[0, 1]`.
pub fn pgd_attack(model: &GuideModel, image: &Tensor<f32>, label: usize, cfg: &AttackConfig) -> Result<Tensor<f32>> {
    let out = pgd_attack_batch(model, image.data(), &[label], cfg)?;
    Tensor::new(image.shape().to_vec(), out.adversarial)
}

pub fn pgd_attack_batch(
    model: &GuideModel,
    pixels: &[f32],
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutput> {
    cfg.validate()?;
    let n = model.input_len();
    if pixels.len() != labels.len() * n {
        return Err(Error::Shape {
            context: "pgd_attack batch",
            expected: vec![labels.len(), n],
            actual: vec![pixels.len()],
        });
    }
    let objectives: Vec<Objective> = labels.iter().map(|&gt| Objective::CrossEntropy { gt }).collect();
    for o in &objectives {
        o.validate(model.class_count())?;
    }
    if cfg.epsilon == 0.0 {
        let clean_logits = model.trace(pixels, labels.len()).logits().to_vec();
        return Ok(AttackOutput {
            adversarial: pixels.to_vec(),
            clean_logits,
        });
    }
    let mut adv = pixels.to_vec();
    let mut delta = vec![0f32; pixels.len()];
    let mut clean_logits = Vec::new();
    for step in 0..cfg.steps {
        let (grads, _, logits) = model.input_gradients(&adv, &objectives)?;
        if step == 0 {
            clean_logits = logits;
        }
        for i in 0..labels.len() {
            let r = i * n..(i + 1) * n;
            ascent_step(
                &pixels[r.clone()],
                &mut delta[r.clone()],
                &grads[r.clone()],
                cfg.step_size,
                cfg.epsilon,
                &mut adv[r],
            );
        }
    }
    Ok(AttackOutput {
        adversarial: adv,
        clean_logits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Clean accuracy of the pre-update model over the epoch.
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Per-epoch metrics plus the epoch x image correctness matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    /// Column labels of `correct`: training image names in dataset order.
    pub image_names: Vec<String>,
    #[serde(skip)]
    pub correct: Vec<Vec<bool>>,
}

const BITS_MAGIC: &[u8; 4] = b"LWBM";

impl TrainingHistory {
    /// Writes the JSON summary and the packed bit matrix (rows = epochs,
    /// columns = training images, least-significant bit first, rows padded to
    /// whole bytes).
    pub fn save(&self, json_path: impl AsRef<Path>, bits_path: impl AsRef<Path>) -> Result<()> {
        let json_path = json_path.as_ref();
        let f = File::create(json_path).map_err(|e| Error::io(json_path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), self)?;
        let bits_path = bits_path.as_ref();
        let f = File::create(bits_path).map_err(|e| Error::io(bits_path, e))?;
        self.write_bits(BufWriter::new(f))
    }

    pub fn load(json_path: impl AsRef<Path>, bits_path: impl AsRef<Path>) -> Result<Self> {
        let json_path = json_path.as_ref();
        let f = File::open(json_path).map_err(|e| Error::io(json_path, e))?;
        let mut history: TrainingHistory = serde_json::from_reader(BufReader::new(f))?;
        let bits_path = bits_path.as_ref();
        let f = File::open(bits_path).map_err(|e| Error::io(bits_path, e))?;
        history.correct = read_bits(BufReader::new(f))?;
        if history.correct.len() != history.epochs.len()
            || history.correct.iter().any(|r| r.len() != history.image_names.len())
        {
            return Err(Error::invalid("bit matrix does not match history dimensions"));
        }
        Ok(history)
    }

    pub fn write_bits<W: Write>(&self, mut w: W) -> Result<()> {
        let cols = self.image_names.len();
        w.write_all(BITS_MAGIC)?;
        w.write_u32::<LittleEndian>(self.correct.len() as u32)?;
        w.write_u32::<LittleEndian>(cols as u32)?;
        for row in &self.correct {
            let mut bytes = vec![0u8; cols.div_ceil(8)];
            for (j, &b) in row.iter().enumerate() {
                if b {
                    bytes[j / 8] |= 1 << (j % 8);
                }
            }
            w.write_all(&bytes)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn read_bits<R: Read>(mut r: R) -> Result<Vec<Vec<bool>>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BITS_MAGIC {
        return Err(Error::invalid("not a correctness bit matrix"));
    }
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(rows);
    let mut bytes = vec![0u8; cols.div_ceil(8)];
    for _ in 0..rows {
        r.read_exact(&mut bytes)?;
        out.push((0..cols).map(|j| bytes[j / 8] >> (j % 8) & 1 == 1).collect());
    }
    Ok(out)
}

/// Trains a guide model from scratch (`warm_start = None`) or fine-tunes an
/// existing one. With `cfg.attack` set, each minibatch is replaced by its PGD
/// adversarial version before the SGD step.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    warm_start: Option<GuideModel>,
) -> Result<(GuideModel, TrainingHistory)> {
    train_with_progress(dataset, cfg, seed, warm_start, |_| {})
}

/// The vanilla model, and the robust model fine-tuned from it.
#[derive(Debug, Clone)]
pub struct GuidePair {
    pub vanilla: GuideModel,
    pub vanilla_history: TrainingHistory,
    pub robust: GuideModel,
    pub robust_history: TrainingHistory,
}

/// Trains a vanilla model with `vanilla`, then fine-tunes a copy of it with
/// `finetune` (which should carry an attack).
pub fn train_guides(
    dataset: &Dataset,
    vanilla: &TrainConfig,
    finetune: &TrainConfig,
    seed: u64,
    mut progress: impl FnMut(&str, &EpochRecord),
) -> Result<GuidePair> {
    let (v, vh) = train_with_progress(dataset, vanilla, seed, None, |r| progress("vanilla", r))?;
    let (r, rh) = train_with_progress(dataset, finetune, seed.wrapping_add(1), Some(v.clone()), |r| {
        progress("robust", r)
    })?;
    Ok(GuidePair {
        vanilla: v,
        vanilla_history: vh,
        robust: r,
        robust_history: rh,
    })
}

pub fn train_with_progress(
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    warm_start: Option<GuideModel>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<(GuideModel, TrainingHistory)> {
    cfg.validate()?;
    let train_idx = dataset.indices(Split::Train);
    let mut val_idx = dataset.indices(Split::Val);
    if val_idx.is_empty() {
        val_idx = dataset.indices(Split::Test);
    }
    if train_idx.is_empty() {
        return Err(Error::invalid("dataset has no training split"));
    }
    if let Some(bad) = dataset.samples.iter().find(|s| s.class >= dataset.class_count()) {
        return Err(Error::InvalidClass {
            index: bad.class,
            classes: dataset.class_count(),
        });
    }

    let mut model = match warm_start {
        Some(m) => m,
        None => {
            let mut spec = NetworkSpec::desk_scale(dataset.class_count());
            spec.input_shape = dataset.shape;
            let norm = Normalization::fit(
                train_idx.iter().map(|&i| dataset.samples[i].pixels.as_slice()),
                dataset.shape.channels,
            );
            GuideModel::init(spec, seed)?.with_normalization(norm)?
        }
    };
    if model.spec().input_shape != dataset.shape || model.class_count() != dataset.class_count() {
        return Err(Error::Shape {
            context: "warm-start model vs dataset",
            expected: vec![
                dataset.shape.channels,
                dataset.shape.height,
                dataset.shape.width,
                dataset.class_count(),
            ],
            actual: {
                let s = model.spec().input_shape;
                vec![s.channels, s.height, s.width, model.class_count()]
            },
        });
    }

    // column of each training image in the correctness matrix
    let mut column = vec![usize::MAX; dataset.len()];
    for (col, &i) in train_idx.iter().enumerate() {
        column[i] = col;
    }
    let mut history = TrainingHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        image_names: train_idx.iter().map(|&i| dataset.samples[i].name.clone()).collect(),
        correct: Vec::with_capacity(cfg.epochs),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order = train_idx.clone();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut flags = vec![false; train_idx.len()];
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = make_batch(dataset, chunk);
            let (step_pixels, clean_correct) = match &cfg.attack {
                Some(attack) => {
                    let out = pgd_attack_batch(&model, &batch.pixels, &batch.labels, attack)?;
                    let k = model.class_count();
                    let correct: Vec<bool> = out
                        .clean_logits
                        .chunks(k)
                        .zip(&batch.labels)
                        .map(|(row, &y)| argmax(row) == y)
                        .collect();
                    (out.adversarial, Some(correct))
                }
                None => (batch.pixels, None),
            };
            let report = model
                .sgd_step(&step_pixels, &batch.labels, lr, cfg.weight_decay)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::Diverged {
                        epoch: epoch + 1,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
            let correct = clean_correct.unwrap_or(report.correct);
            for (&id, ok) in batch.ids.iter().zip(correct) {
                flags[column[id]] = ok;
            }
            loss_sum += report.loss * chunk.len() as f64;
        }
        let loss = loss_sum / train_idx.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: epoch + 1, loss });
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss,
            train_accuracy: flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64,
            val_accuracy: if val_idx.is_empty() {
                f64::NAN
            } else {
                accuracy(&model, dataset, &val_idx)?
            },
        };
        progress(&record);
        history.epochs.push(record);
        history.correct.push(flags);
    }
    Ok((model, history))
}

fn make_batch(dataset: &Dataset, indices: &[usize]) -> Batch<f32> {
    let mut pixels = Vec::with_capacity(indices.len() * dataset.shape.len());
    for &i in indices {
        pixels.extend_from_slice(&dataset.samples[i].pixels);
    }
    Batch {
        pixels,
        labels: indices.iter().map(|&i| dataset.samples[i].class).collect(),
        ids: indices.to_vec(),
    }
}

const EVAL_CHUNK: usize = 128;

/// Clean top-1 accuracy over `indices`.
pub fn accuracy(model: &GuideModel, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("accuracy over an empty set"));
    }
    let mut hits = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let preds = model.predict(&dataset.batch(chunk))?;
        hits += preds
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == dataset.samples[i].class)
            .count();
    }
    Ok(hits as f64 / indices.len() as f64)
}

/// Top-1 accuracy on PGD-perturbed versions of the images.
pub fn robust_accuracy(model: &GuideModel, dataset: &Dataset, indices: &[usize], attack: &AttackConfig) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("accuracy over an empty set"));
    }
    let mut hits = 0usize;
    let s = dataset.shape;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = make_batch(dataset, chunk);
        let adv = pgd_attack_batch(model, &batch.pixels, &batch.labels, attack)?;
        let t = Tensor::new(vec![chunk.len(), s.channels, s.height, s.width], adv.adversarial)?;
        let preds = model.predict(&t)?;
        hits += preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    }
    Ok(hits as f64 / indices.len() as f64)
}
