//! Simulated participants: nearest-prototype learners that take a session
//! exactly as a person would, through the trial/response protocol.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::Variant;
use crate::dataset::preprocess;
use crate::error::{Error, Result};
use crate::expserve::{outcome_table, Feedback, NextTrial, ResponseRequest, Service};
use crate::statlab::OutcomeTable;
use crate::synth::{attention_image, CheckShape};
use crate::tensornet::{GuideModel, InputShape, Tensor};

/// Nearest-prototype classifier with a delta-rule update.
#[derive(Debug, Clone)]
pub struct PrototypeLearner {
    prototypes: Vec<Vec<f64>>,
    lr: f64,
    temperature: f64,
    rng: ChaCha8Rng,
}

impl PrototypeLearner {
    /// Zero prototypes for `classes` classes in a `dim`-dimensional space.
    pub fn new(classes: usize, dim: usize, lr: f64, temperature: f64, seed: u64) -> Result<Self> {
        Self::with_prototypes(vec![vec![0.0; dim]; classes], lr, temperature, seed)
    }

    pub fn with_prototypes(prototypes: Vec<Vec<f64>>, lr: f64, temperature: f64, seed: u64) -> Result<Self> {
        if prototypes.is_empty() {
            return Err(Error::invalid("learner needs at least one class"));
        }
        let dim = prototypes[0].len();
        if prototypes.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid("prototypes differ in dimension"));
        }
        if !(lr > 0.0 && lr <= 1.0) {
            return Err(Error::invalid(format!("learning rate {lr} outside (0, 1]")));
        }
        if !(temperature >= 0.0) {
            return Err(Error::invalid(format!("temperature {temperature} is negative")));
        }
        Ok(PrototypeLearner {
            prototypes,
            lr,
            temperature,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].len()
    }

    fn check_dim(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.dim() {
            return Err(Error::Shape {
                context: "learner features",
                expected: vec![self.dim()],
                actual: vec![features.len()],
            });
        }
        Ok(())
    }

    pub fn squared_distances(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(features)?;
        Ok(self
            .prototypes
            .iter()
            .map(|p| p.iter().zip(features).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect())
    }

    /// Softmax of `-d / T`; at `T = 0` all mass sits on the nearest
    /// prototype (lowest index on ties).
    pub fn choice_probabilities(&self, features: &[f64]) -> Result<Vec<f64>> {
        let d = self.squared_distances(features)?;
        let mut p = vec![0.0; d.len()];
        if self.temperature == 0.0 {
            p[argmin(&d)] = 1.0;
            return Ok(p);
        }
        let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
        for (pi, di) in p.iter_mut().zip(&d) {
            *pi = (-(di - lo) / self.temperature).exp();
        }
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= z);
        Ok(p)
    }

    pub fn respond(&mut self, features: &[f64]) -> Result<usize> {
        if self.temperature == 0.0 {
            return Ok(argmin(&self.squared_distances(features)?));
        }
        let p = self.choice_probabilities(features)?;
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        for (k, pk) in p.iter().enumerate() {
            acc += pk;
            if u < acc {
                return Ok(k);
            }
        }
        Ok(p.len() - 1)
    }

    /// Moves the true class's prototype a fraction `lr` toward `features`.
    pub fn update(&mut self, features: &[f64], class: usize) -> Result<()> {
        self.check_dim(features)?;
        let k = self.prototypes.len();
        let p = self.prototypes.get_mut(class).ok_or(Error::InvalidClass {
            index: class,
            classes: k,
        })?;
        for (a, b) in p.iter_mut().zip(features) {
            *a += self.lr * (b - *a);
        }
        Ok(())
    }
}

fn argmin(d: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in d.iter().enumerate() {
        if x < d[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpace {
    /// Penultimate activations of the guide model.
    Guide,
    /// Raw pixels averaged over `factor x factor` blocks.
    Pixels { factor: usize },
}

/// Maps displayed images to learner features, centred on a reference image
/// set and rescaled so that one unit is its typical per-dimension spread.
#[derive(Clone)]
pub struct FeatureExtractor {
    space: FeatureSpace,
    shape: InputShape,
    model: Option<Arc<GuideModel>>,
    center: Vec<f64>,
    scale: f64,
}

impl FeatureExtractor {
    /// `reference` holds concatenated images used to fix the scale.
    pub fn new(
        space: FeatureSpace,
        shape: InputShape,
        model: Option<Arc<GuideModel>>,
        reference: &[f32],
    ) -> Result<Self> {
        match space {
            FeatureSpace::Guide => {
                let m = model
                    .as_ref()
                    .ok_or_else(|| Error::invalid("guide features need a model"))?;
                if m.spec().input_shape != shape {
                    return Err(Error::invalid("guide model input shape differs from the image shape"));
                }
            }
            FeatureSpace::Pixels { factor } => {
                if factor == 0 || shape.height % factor != 0 || shape.width % factor != 0 {
                    return Err(Error::invalid(format!(
                        "downsampling factor {factor} does not divide the image"
                    )));
                }
            }
        }
        let mut fx = FeatureExtractor {
            space,
            shape,
            model,
            center: Vec::new(),
            scale: 1.0,
        };
        if reference.is_empty() || reference.len() % shape.len() != 0 {
            return Err(Error::invalid("reference images do not match the image shape"));
        }
        let feats = fx.extract_batch(reference)?;
        let n = feats.len() as f64;
        let dim = feats[0].len();
        let mut var = 0.0;
        let mut center = vec![0.0; dim];
        for (j, c) in center.iter_mut().enumerate() {
            *c = feats.iter().map(|f| f[j]).sum::<f64>() / n;
            var += feats.iter().map(|f| (f[j] - *c).powi(2)).sum::<f64>() / n;
        }
        let rms = (var / dim as f64).sqrt();
        let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
        fx.center = center.iter().map(|c| c * scale).collect();
        fx.scale = scale;
        Ok(fx)
    }

    pub fn space(&self) -> FeatureSpace {
        self.space
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        if !self.center.is_empty() {
            return self.center.len();
        }
        match self.space {
            FeatureSpace::Guide => {
                let m = self.model.as_ref().expect("guide space has a model");
                m.features(&Tensor::zeros(vec![
                    1,
                    self.shape.channels,
                    self.shape.height,
                    self.shape.width,
                ]))
                .map(|t| t.len())
                .unwrap_or(0)
            }
            FeatureSpace::Pixels { factor } => self.shape.len() / (factor * factor),
        }
    }

    /// Features of concatenated CHW images.
    pub fn extract_batch(&self, pixels: &[f32]) -> Result<Vec<Vec<f64>>> {
        let mut out = self.raw_batch(pixels)?;
        if !self.center.is_empty() {
            for f in &mut out {
                f.iter_mut().zip(&self.center).for_each(|(v, c)| *v -= c);
            }
        }
        Ok(out)
    }

    fn raw_batch(&self, pixels: &[f32]) -> Result<Vec<Vec<f64>>> {
        let n = self.shape.len();
        if pixels.len() % n != 0 {
            return Err(Error::invalid("pixel buffer is not a whole number of images"));
        }
        let b = pixels.len() / n;
        match self.space {
            FeatureSpace::Guide => {
                let m = self.model.as_ref().expect("guide space has a model");
                let mut out = Vec::with_capacity(b);
                for chunk in pixels.chunks(128 * n) {
                    let k = chunk.len() / n;
                    let t = Tensor::new(
                        vec![k, self.shape.channels, self.shape.height, self.shape.width],
                        chunk.to_vec(),
                    )?;
                    let f = m.features(&t)?;
                    let w = f.len() / k;
                    out.extend(
                        f.data()
                            .chunks(w)
                            .map(|r| r.iter().map(|&x| x as f64 * self.scale).collect()),
                    );
                }
                Ok(out)
            }
            FeatureSpace::Pixels { factor } => Ok(pixels.chunks(n).map(|img| self.downsample(img, factor)).collect()),
        }
    }

    fn downsample(&self, img: &[f32], factor: usize) -> Vec<f64> {
        let (c, h, w) = (self.shape.channels, self.shape.height, self.shape.width);
        let (oh, ow) = (h / factor, w / factor);
        let norm = self.scale / (factor * factor) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * oh + y / factor) * ow + x / factor] += img[(ch * h + y) * w + x] as f64;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= norm);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub features: FeatureSpace,
    pub lr: f64,
    pub temperature: f64,
    /// Std of the Gaussian noise added to every feature on every viewing.
    pub jitter_sigma: f64,
    pub min_latency_ms: u64,
    pub max_latency_ms: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            features: FeatureSpace::Guide,
            lr: 0.03,
            temperature: 0.0,
            jitter_sigma: 2.5,
            min_latency_ms: 600,
            max_latency_ms: 4_000,
        }
    }
}

/// The participant side of the session protocol.
pub trait SessionDriver {
    fn create(&mut self, participant_id: &str, variant: Option<Variant>) -> Result<String>;
    fn next_trial(&mut self, session_id: &str) -> Result<NextTrial>;
    fn submit(&mut self, session_id: &str, response: &ResponseRequest) -> Result<Feedback>;
    /// PNG bytes behind a trial's image URL.
    fn fetch_image(&mut self, url: &str) -> Result<Vec<u8>>;
}

impl SessionDriver for &Service {
    fn create(&mut self, participant_id: &str, variant: Option<Variant>) -> Result<String> {
        self.create_session_as(participant_id, variant)
    }

    fn next_trial(&mut self, session_id: &str) -> Result<NextTrial> {
        Service::next_trial(self, session_id)
    }

    fn submit(&mut self, session_id: &str, response: &ResponseRequest) -> Result<Feedback> {
        self.submit_response(session_id, response)
    }

    fn fetch_image(&mut self, url: &str) -> Result<Vec<u8>> {
        let token = url
            .rsplit('/')
            .next()
            .and_then(|f| f.strip_suffix(".png"))
            .ok_or_else(|| Error::invalid(format!("not an asset url: {url}")))?;
        self.assets()
            .png(token)
            .ok_or_else(|| Error::UnknownImage(token.to_string()))?
    }
}

/// Caches decoded images' features by URL; shared across a cohort.
pub struct FeatureCache {
    extractor: FeatureExtractor,
    by_url: HashMap<String, Arc<Vec<f64>>>,
    templates: Vec<(String, Vec<f32>)>,
}

impl FeatureCache {
    pub fn new(extractor: FeatureExtractor) -> Self {
        let s = extractor.shape;
        let templates = if s.height == s.width && s.channels == 3 {
            [CheckShape::Circle, CheckShape::Triangle]
                .into_iter()
                .map(|c| (c.label().to_string(), attention_image(c, s.height)))
                .collect()
        } else {
            Vec::new()
        };
        FeatureCache {
            extractor,
            by_url: HashMap::new(),
            templates,
        }
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    fn decode(&self, png: &[u8]) -> Result<Vec<f32>> {
        Ok(preprocess(&image::load_from_memory(png)?, self.extractor.shape))
    }

    fn features(&mut self, driver: &mut impl SessionDriver, url: &str) -> Result<Arc<Vec<f64>>> {
        if let Some(f) = self.by_url.get(url) {
            return Ok(f.clone());
        }
        let px = self.decode(&driver.fetch_image(url)?)?;
        let f = Arc::new(self.extractor.extract_batch(&px)?.remove(0));
        self.by_url.insert(url.to_string(), f.clone());
        Ok(f)
    }

    /// Answers a circle/triangle check by nearest template.
    fn attention_answer(&self, driver: &mut impl SessionDriver, url: &str, options: &[String]) -> Result<String> {
        let px = self.decode(&driver.fetch_image(url)?)?;
        let best = self
            .templates
            .iter()
            .filter(|(label, _)| options.contains(label))
            .map(|(label, t)| {
                let d: f64 = t.iter().zip(&px).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                (d, label)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0));
        Ok(best.map_or_else(|| options[0].clone(), |(_, l)| l.clone()))
    }
}

fn derive_seed(seed: u64, participant_id: &str) -> u64 {
    let d = Sha256::digest([&seed.to_le_bytes()[..], participant_id.as_bytes()].concat());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn is_attention(options: &[String]) -> bool {
    let labels = [CheckShape::Circle.label(), CheckShape::Triangle.label()];
    options.len() == 2 && options.iter().all(|o| labels.contains(&o.as_str()))
}

/// Takes one full session and returns its id.
pub fn run_participant(
    driver: &mut impl SessionDriver,
    cache: &mut FeatureCache,
    cfg: &LearnerConfig,
    participant_id: &str,
    variant: Option<Variant>,
    seed: u64,
) -> Result<String> {
    if cfg.min_latency_ms > cfg.max_latency_ms {
        return Err(Error::invalid("min latency exceeds max latency"));
    }
    let jitter = Normal::new(0.0, cfg.jitter_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let learner_seed = derive_seed(seed, participant_id);
    let mut rng = ChaCha8Rng::seed_from_u64(learner_seed);
    rng.set_stream(1);
    let session = driver.create(participant_id, variant)?;
    let dim = cache.extractor.dim();
    // class labels are learnt as they are revealed; order = sorted aliases
    let mut labels: Vec<String> = Vec::new();
    let mut learner: Option<PrototypeLearner> = None;
    loop {
        let trial = match driver.next_trial(&session)? {
            NextTrial::Trial(t) => t,
            NextTrial::Completed(_) => return Ok(session),
        };
        let latency_ms = rng.random_range(cfg.min_latency_ms..=cfg.max_latency_ms);
        if is_attention(&trial.options) {
            let choice = cache.attention_answer(driver, &trial.image_url, &trial.options)?;
            driver.submit(
                &session,
                &ResponseRequest {
                    trial_index: trial.trial_index,
                    choice: Some(choice),
                    latency_ms,
                },
            )?;
            continue;
        }
        if labels.is_empty() {
            labels = trial.options.clone();
            labels.sort();
            learner = Some(PrototypeLearner::new(
                labels.len(),
                dim,
                cfg.lr,
                cfg.temperature,
                learner_seed,
            )?);
        }
        let learner = learner.as_mut().expect("initialised above");
        let base = cache.features(driver, &trial.image_url)?;
        let seen: Vec<f64> = base.iter().map(|&v| v + jitter.sample(&mut rng)).collect();
        let k = learner.respond(&seen)?;
        let feedback = driver.submit(
            &session,
            &ResponseRequest {
                trial_index: trial.trial_index,
                choice: Some(labels[k].clone()),
                latency_ms,
            },
        )?;
        if let Feedback::Train { correct_label, .. } = feedback {
            let c = labels
                .iter()
                .position(|l| *l == correct_label)
                .ok_or_else(|| Error::invalid(format!("feedback label {correct_label:?} was never offered")))?;
            learner.update(&seen, c)?;
        }
    }
}

/// Participant ids of a cohort, in run order.
pub fn cohort_ids(variants: &[Variant], n_per_variant: usize) -> Vec<(String, Variant)> {
    variants
        .iter()
        .flat_map(|&v| (0..n_per_variant).map(move |i| (format!("sim-{}-{i:04}", v.as_str().to_lowercase()), v)))
        .collect()
}

/// Runs `n_per_variant` participants of each variant through `driver` and
/// returns their session ids.
pub fn simulate_cohort(
    driver: &mut impl SessionDriver,
    cache: &mut FeatureCache,
    cfg: &LearnerConfig,
    variants: &[Variant],
    n_per_variant: usize,
    seed: u64,
) -> Result<Vec<String>> {
    cohort_ids(variants, n_per_variant)
        .into_iter()
        .map(|(id, v)| run_participant(driver, cache, cfg, &id, Some(v), seed))
        .collect()
}

/// In-process cohort against `service`; the table comes from its event log
/// exactly as it would for human sessions.
pub fn run_cohort(
    service: &Service,
    cache: &mut FeatureCache,
    cfg: &LearnerConfig,
    variants: &[Variant],
    n_per_variant: usize,
    seed: u64,
) -> Result<OutcomeTable> {
    let mut driver = service;
    simulate_cohort(&mut driver, cache, cfg, variants, n_per_variant, seed)?;
    outcome_table(&service.state(), &service.config().experiment_id, None)
}
