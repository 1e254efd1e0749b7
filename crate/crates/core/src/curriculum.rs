//! Training schedules, difficulty-capped block sampling, the constrained
//! shuffle, and fully materialised session plans.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::difficulty::DifficultyIndex;
use crate::error::{Error, Result};
use crate::synth::CheckShape;

pub const TRAINING_BLOCKS: usize = 8;
/// Blocks whose trials the shuffled variants permute (the first six).
pub const SHUFFLED_BLOCKS: usize = 6;
pub const LWISE_EPSILON: [f64; TRAINING_BLOCKS] = [8.0, 4.0, 2.0, 1.0, 0.5, 0.25, 0.0, 0.0];
pub const LWISE_CAP: [f64; TRAINING_BLOCKS] = [0.10, 0.25, 0.40, 0.55, 0.70, 0.85, 1.0, 1.0];
pub const DEFAULT_ALIASES: [&str; 4] = ["Ajax", "Eris", "Leda", "Tyro"];

/// Percentile comparisons tolerate representation error in `rank / n`.
const CAP_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Lwise,
    Et,
    EtShuffled,
    Ds,
    DsShuffled,
    Control,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Lwise,
        Variant::Et,
        Variant::EtShuffled,
        Variant::Ds,
        Variant::DsShuffled,
        Variant::Control,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Lwise => "LWISE",
            Variant::Et => "ET",
            Variant::EtShuffled => "ET_SHUFFLED",
            Variant::Ds => "DS",
            Variant::DsShuffled => "DS_SHUFFLED",
            Variant::Control => "CONTROL",
        }
    }

    pub fn is_shuffled(&self) -> bool {
        matches!(self, Variant::EtShuffled | Variant::DsShuffled)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub variant: Variant,
    pub epsilon: [f64; TRAINING_BLOCKS],
    pub cap: [f64; TRAINING_BLOCKS],
    pub alpha: f64,
}

/// The exact per-block tables of each variant.
pub fn build_schedule(variant: Variant) -> ScheduleConfig {
    let (epsilon, cap) = match variant {
        Variant::Lwise => (LWISE_EPSILON, LWISE_CAP),
        Variant::Et | Variant::EtShuffled => (LWISE_EPSILON, [1.0; TRAINING_BLOCKS]),
        Variant::Ds | Variant::DsShuffled => ([0.0; TRAINING_BLOCKS], LWISE_CAP),
        Variant::Control => ([0.0; TRAINING_BLOCKS], [1.0; TRAINING_BLOCKS]),
    };
    ScheduleConfig {
        variant,
        epsilon,
        cap,
        alpha: 1.0,
    }
}

/// Images of the task classes with their percentile, per class, for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePool {
    /// `(class, [(image id, d)])`, images sorted by id.
    pub classes: Vec<(usize, Vec<(String, f64)>)>,
}

impl ImagePool {
    pub fn from_index(index: &DifficultyIndex, split: Split, classes: &[usize]) -> Self {
        ImagePool {
            classes: classes
                .iter()
                .map(|&c| {
                    let mut v: Vec<(String, f64)> = index
                        .entries()
                        .iter()
                        .filter(|e| e.split == split && e.class == c)
                        .map(|e| (e.image_id.clone(), e.d))
                        .collect();
                    v.sort_by(|a, b| a.0.cmp(&b.0));
                    (c, v)
                })
                .collect(),
        }
    }
}

/// Draws `per_class` unseen images with `d <= cap` from every class, marks
/// them seen, and returns `(image id, class)` in shuffled order.
pub fn sample_block(
    pool: &ImagePool,
    cap: f64,
    per_class: usize,
    seen: &mut HashSet<String>,
    rng: &mut impl Rng,
) -> Result<Vec<(String, usize)>> {
    let mut block = Vec::with_capacity(per_class * pool.classes.len());
    for (class, images) in &pool.classes {
        let eligible: Vec<&String> = images
            .iter()
            .filter(|(id, d)| *d <= cap + CAP_SLACK && !seen.contains(id))
            .map(|(id, _)| id)
            .collect();
        if eligible.len() < per_class {
            return Err(Error::InsufficientPool {
                class: *class,
                cap,
                available: eligible.len(),
                needed: per_class,
            });
        }
        for id in eligible.choose_multiple(rng, per_class) {
            seen.insert((*id).clone());
            block.push(((*id).clone(), *class));
        }
    }
    block.shuffle(rng);
    Ok(block)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    /// Dataset image id, or `attention/<shape>` for attention checks.
    pub image_id: String,
    /// Ground-truth class; `None` for attention checks.
    pub class: Option<usize>,
    pub phase: Phase,
    pub epsilon: f64,
    pub is_attention_check: bool,
    /// Response labels in display order.
    pub options: Vec<String>,
    /// The correct label (class alias, or the shape name for checks).
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub index: usize,
    pub phase: Phase,
    pub trials: Vec<Trial>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub seed: u64,
    pub variant: Variant,
    pub schedule: ScheduleConfig,
    pub task_classes: Vec<usize>,
    /// class id -> alias; stored as `[class, alias]` pairs.
    #[serde(with = "alias_pairs")]
    pub aliases: BTreeMap<usize, String>,
    /// Seed from which the per-trial option orders were drawn.
    pub layout_seed: u64,
    pub blocks: Vec<Block>,
}

mod alias_pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<usize, String>, s: S) -> Result<S::Ok, S::Error> {
        m.iter().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, String>, D::Error> {
        Ok(Vec::<(usize, String)>::deserialize(d)?.into_iter().collect())
    }
}

impl SessionPlan {
    pub fn trials(&self) -> impl Iterator<Item = &Trial> {
        self.blocks.iter().flat_map(|b| b.trials.iter())
    }

    pub fn trial(&self, index: usize) -> Option<&Trial> {
        self.trials().nth(index)
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.trials.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Block index of each trial, in trial order.
    pub fn block_of_trials(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .flat_map(|b| std::iter::repeat_n(b.index, b.trials.len()))
            .collect()
    }

    pub fn attention_count(&self) -> usize {
        self.trials().filter(|t| t.is_attention_check).count()
    }

    /// Canonical JSON (field order fixed by the type definitions).
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn class_of_alias(&self, alias: &str) -> Option<usize> {
        self.aliases.iter().find(|(_, a)| a.as_str() == alias).map(|(c, _)| *c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    /// Dataset class ids of the task (usually 2 or 4).
    pub task_classes: Vec<usize>,
    pub trials_per_training_block: usize,
    pub test_blocks: usize,
    pub trials_per_test_block: usize,
    pub attention_checks_per_block: usize,
    pub aliases: Vec<String>,
    pub alpha: f64,
    pub train_split: Split,
    pub test_split: Split,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            task_classes: vec![0, 1, 2, 3],
            trials_per_training_block: 16,
            test_blocks: 2,
            trials_per_test_block: 20,
            attention_checks_per_block: 2,
            aliases: DEFAULT_ALIASES.iter().map(|s| s.to_string()).collect(),
            alpha: 1.0,
            train_split: Split::Train,
            test_split: Split::Test,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.task_classes.len();
        if k < 2 {
            return Err(Error::Config("a task needs at least two classes".into()));
        }
        if self.aliases.len() < k {
            return Err(Error::Config(format!("{} aliases for {k} classes", self.aliases.len())));
        }
        let distinct: HashSet<&usize> = self.task_classes.iter().collect();
        if distinct.len() != k {
            return Err(Error::Config("task classes repeat".into()));
        }
        if self.trials_per_training_block % k != 0 || self.trials_per_test_block % k != 0 {
            return Err(Error::Config(format!(
                "block lengths must be multiples of the class count {k}"
            )));
        }
        if self.trials_per_training_block == 0 || self.trials_per_test_block == 0 {
            return Err(Error::Config("blocks must be non-empty".into()));
        }
        if self.train_split == self.test_split {
            return Err(Error::Config("train and test splits must differ".into()));
        }
        Ok(())
    }
}

// independent random streams of a plan
const STREAM_SAMPLE: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_ALIAS: u64 = 2;
const STREAM_ATTENTION: u64 = 3;
const STREAM_LAYOUT: u64 = 4;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

/// Permutes trials among same-class slots across the first six training
/// blocks. Each trial keeps its own epsilon; the class of every slot is
/// unchanged.
pub fn constrained_shuffle(blocks: &mut [Block], rng: &mut impl Rng) {
    let n = blocks.len().min(SHUFFLED_BLOCKS);
    let mut by_class: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (b, block) in blocks[..n].iter().enumerate() {
        for (i, t) in block.trials.iter().enumerate() {
            if let (Some(c), false) = (t.class, t.is_attention_check) {
                by_class.entry(c).or_default().push((b, i));
            }
        }
    }
    for slots in by_class.values() {
        let mut moved: Vec<Trial> = slots.iter().map(|&(b, i)| blocks[b].trials[i].clone()).collect();
        moved.shuffle(rng);
        for (&(b, i), t) in slots.iter().zip(moved) {
            blocks[b].trials[i] = t;
        }
    }
}

/// Builds the complete plan for one participant. Training blocks draw from
/// `train_split` under the variant's caps; test blocks draw uncapped from
/// `test_split` at epsilon 0.
pub fn make_session_plan(
    cfg: &PlanConfig,
    index: &DifficultyIndex,
    variant: Variant,
    seed: u64,
) -> Result<SessionPlan> {
    cfg.validate()?;
    let schedule = ScheduleConfig {
        alpha: cfg.alpha,
        ..build_schedule(variant)
    };
    let k = cfg.task_classes.len();

    let mut aliases_pool: Vec<String> = cfg.aliases.clone();
    aliases_pool.shuffle(&mut stream(seed, STREAM_ALIAS));
    let aliases: BTreeMap<usize, String> = cfg.task_classes.iter().copied().zip(aliases_pool).collect();

    let mut rng = stream(seed, STREAM_SAMPLE);
    let train_pool = ImagePool::from_index(index, cfg.train_split, &cfg.task_classes);
    let test_pool = ImagePool::from_index(index, cfg.test_split, &cfg.task_classes);
    let mut seen = HashSet::new();
    let main_trial = |id: String, class: usize, phase: Phase, epsilon: f64| Trial {
        image_id: id,
        class: Some(class),
        phase,
        epsilon,
        is_attention_check: false,
        options: Vec::new(),
        answer: aliases[&class].clone(),
    };

    let mut blocks = Vec::with_capacity(TRAINING_BLOCKS + cfg.test_blocks);
    for b in 0..TRAINING_BLOCKS {
        let drawn = sample_block(
            &train_pool,
            schedule.cap[b],
            cfg.trials_per_training_block / k,
            &mut seen,
            &mut rng,
        )?;
        blocks.push(Block {
            index: b,
            phase: Phase::Train,
            trials: drawn
                .into_iter()
                .map(|(id, c)| main_trial(id, c, Phase::Train, schedule.epsilon[b]))
                .collect(),
        });
    }
    for t in 0..cfg.test_blocks {
        let drawn = sample_block(&test_pool, 1.0, cfg.trials_per_test_block / k, &mut seen, &mut rng)?;
        blocks.push(Block {
            index: TRAINING_BLOCKS + t,
            phase: Phase::Test,
            trials: drawn
                .into_iter()
                .map(|(id, c)| main_trial(id, c, Phase::Test, 0.0))
                .collect(),
        });
    }
    if variant.is_shuffled() {
        constrained_shuffle(&mut blocks[..TRAINING_BLOCKS], &mut stream(seed, STREAM_SHUFFLE));
    }

    let mut arng = stream(seed, STREAM_ATTENTION);
    for block in &mut blocks {
        for _ in 0..cfg.attention_checks_per_block {
            let shape = if arng.random_bool(0.5) {
                CheckShape::Circle
            } else {
                CheckShape::Triangle
            };
            // never the first trial of a block
            let at = arng.random_range(1..=block.trials.len());
            block.trials.insert(
                at,
                Trial {
                    image_id: format!("attention/{}", shape.label()),
                    class: None,
                    phase: block.phase,
                    epsilon: 0.0,
                    is_attention_check: true,
                    options: Vec::new(),
                    answer: shape.label().to_string(),
                },
            );
        }
    }

    let layout_seed = seed;
    let mut lrng = stream(layout_seed, STREAM_LAYOUT);
    let alias_options: Vec<String> = aliases.values().cloned().collect();
    let shape_options: Vec<String> = [CheckShape::Circle, CheckShape::Triangle]
        .iter()
        .map(|s| s.label().to_string())
        .collect();
    for t in blocks.iter_mut().flat_map(|b| b.trials.iter_mut()) {
        let mut opts = if t.is_attention_check {
            shape_options.clone()
        } else {
            alias_options.clone()
        };
        opts.shuffle(&mut lrng);
        t.options = opts;
    }

    Ok(SessionPlan {
        seed,
        variant,
        schedule,
        task_classes: cfg.task_classes.clone(),
        aliases,
        layout_seed,
        blocks,
    })
}
