//! Shared fixtures: the synthetic dataset and the two guide models, trained
//! once and cached under the cargo target directory.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use lwise_core::dataset::Dataset;
use lwise_core::robusttrain::{train_guides, TrainConfig, TrainingHistory};
use lwise_core::synth::{generate, SynthConfig};
use lwise_core::tensornet::{checkpoint, GuideModel};

pub const DATA_SEED: u64 = 7;
pub const TRAIN_SEED: u64 = 1;

pub struct Guides {
    pub dataset: Arc<Dataset>,
    pub vanilla: Arc<GuideModel>,
    pub robust: Arc<GuideModel>,
    pub vanilla_history: TrainingHistory,
    pub robust_history: TrainingHistory,
}

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("guides-d{DATA_SEED}-s{TRAIN_SEED}-v1"))
}

fn try_load(dir: &Path, dataset: Arc<Dataset>) -> Option<Guides> {
    let vanilla = checkpoint::load(dir.join("vanilla.lwgm")).ok()?;
    let robust = checkpoint::load(dir.join("robust.lwgm")).ok()?;
    let vanilla_history = TrainingHistory::load(dir.join("vanilla.json"), dir.join("vanilla.bits")).ok()?;
    let robust_history = TrainingHistory::load(dir.join("robust.json"), dir.join("robust.bits")).ok()?;
    Some(Guides {
        dataset,
        vanilla: Arc::new(vanilla),
        robust: Arc::new(robust),
        vanilla_history,
        robust_history,
    })
}

fn train_and_store(dir: &Path, dataset: Arc<Dataset>) -> Guides {
    train_and_store_seeded(dir, dataset, TRAIN_SEED)
}

fn train_and_store_seeded(dir: &Path, dataset: Arc<Dataset>, seed: u64) -> Guides {
    let pair = train_guides(
        &dataset,
        &TrainConfig::desk_scale_vanilla(),
        &TrainConfig::desk_scale_finetune(),
        seed,
        |_, _| {},
    )
    .expect("guide training");
    // write into a scratch directory, then rename, so a concurrent reader
    // never sees a half-written cache
    let tmp = dir.with_extension(format!("tmp{}", std::process::id()));
    std::fs::create_dir_all(&tmp).unwrap();
    checkpoint::save(&pair.vanilla, tmp.join("vanilla.lwgm")).unwrap();
    checkpoint::save(&pair.robust, tmp.join("robust.lwgm")).unwrap();
    pair.vanilla_history
        .save(tmp.join("vanilla.json"), tmp.join("vanilla.bits"))
        .unwrap();
    pair.robust_history
        .save(tmp.join("robust.json"), tmp.join("robust.bits"))
        .unwrap();
    if std::fs::rename(&tmp, dir).is_err() {
        let _ = std::fs::remove_dir_all(&tmp);
    }
    Guides {
        dataset,
        vanilla: Arc::new(pair.vanilla),
        robust: Arc::new(pair.robust),
        vanilla_history: pair.vanilla_history,
        robust_history: pair.robust_history,
    }
}

pub fn dataset() -> Arc<Dataset> {
    static DS: OnceLock<Arc<Dataset>> = OnceLock::new();
    DS.get_or_init(|| Arc::new(generate(&SynthConfig::default(), DATA_SEED)))
        .clone()
}

/// The trained vanilla and robust guides (about a minute on first use).
pub fn guides() -> &'static Guides {
    static G: OnceLock<Guides> = OnceLock::new();
    G.get_or_init(|| {
        let dir = cache_dir();
        try_load(&dir, dataset()).unwrap_or_else(|| train_and_store(&dir, dataset()))
    })
}

pub fn pixels_of(ds: &Dataset, indices: &[usize]) -> Vec<f32> {
    indices
        .iter()
        .flat_map(|&i| ds.samples[i].pixels.iter().copied())
        .collect()
}

/// A second, independently seeded guide pair used as an outside judge.
pub fn evaluator() -> &'static Guides {
    static G: OnceLock<Guides> = OnceLock::new();
    G.get_or_init(|| {
        let dir = cache_dir().with_file_name(format!("guides-d{DATA_SEED}-s{}-v1", TRAIN_SEED + 100));
        try_load(&dir, dataset()).unwrap_or_else(|| train_and_store_seeded(&dir, dataset(), TRAIN_SEED + 100))
    })
}
