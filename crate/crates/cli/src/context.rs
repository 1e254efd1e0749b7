use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use lwise_core::dataset::Dataset;
use lwise_core::difficulty::DifficultyIndex;
use lwise_core::expserve::{Clock, EnhancingAssets, EventLog, ExperimentConfig, Service};
use lwise_core::synth::{generate, SynthConfig};
use lwise_core::tensornet::{checkpoint, GuideModel, InputShape};
use lwise_core::{Error, Result};

pub const DEFAULT_SYNTHETIC_SEED: u64 = 7;

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data.images {
        Some(root) => Dataset::load_folder(root, InputShape::new(32, 32, 3)),
        None => Ok(generate(
            &SynthConfig::default(),
            cfg.data.synthetic_seed.unwrap_or(DEFAULT_SYNTHETIC_SEED),
        )),
    }
}

pub fn load_model(cfg: &ExperimentConfig) -> Result<GuideModel> {
    let path = cfg
        .data
        .model
        .as_ref()
        .ok_or_else(|| Error::Config("data.model is not set".into()))?;
    checkpoint::load(path)
}

/// The configured index file, or a fresh one scored by `model`.
pub fn load_index(cfg: &ExperimentConfig, model: &GuideModel, dataset: &Dataset) -> Result<DifficultyIndex> {
    match &cfg.data.index {
        Some(p) if p.exists() => {
            let f = File::open(p).map_err(|e| Error::io(p, e))?;
            DifficultyIndex::read_csv(BufReader::new(f))
        }
        _ => DifficultyIndex::build(model, dataset),
    }
}

pub struct Loaded {
    pub config: ExperimentConfig,
    pub dataset: Arc<Dataset>,
    pub model: Arc<GuideModel>,
    pub index: Arc<DifficultyIndex>,
}

impl Loaded {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let dataset = Arc::new(load_dataset(&config)?);
        let model = Arc::new(load_model(&config)?);
        let index = Arc::new(load_index(&config, &model, &dataset)?);
        Ok(Loaded {
            config,
            dataset,
            model,
            index,
        })
    }

    pub fn service(&self, log: Option<&Path>, clock: Arc<dyn Clock>) -> Result<Service> {
        let assets = Arc::new(EnhancingAssets::new(
            &self.config.experiment_id,
            self.dataset.clone(),
            self.model.clone(),
            self.config.plan.task_classes.clone(),
            self.config.plan.alpha,
        ));
        match log {
            Some(p) => Service::open(self.config.clone(), self.index.clone(), assets, clock, p),
            None => Service::new(
                self.config.clone(),
                self.index.clone(),
                assets,
                clock,
                EventLog::in_memory(),
                &[],
            ),
        }
    }
}
