//! Trial images: natural, enhanced and attention-check pixels behind opaque
//! tokens.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::dataset::{encode_png, Dataset};
use crate::enhance::{enhance_batch, EnhanceConfig};
use crate::error::{Error, Result};
use crate::synth::{attention_image, CheckShape};
use crate::tensornet::{GuideModel, InputShape};

pub const ATTENTION_PREFIX: &str = "attention/";

/// Token naming one `(image, epsilon)` rendering within an experiment. It
/// reveals neither the image id nor the budget.
pub fn asset_token(experiment_id: &str, image_id: &str, epsilon: f64) -> String {
    let mut h = Sha256::new();
    h.update(experiment_id.as_bytes());
    h.update([0]);
    h.update(image_id.as_bytes());
    h.update([0]);
    h.update(epsilon.to_bits().to_le_bytes());
    hex::encode(&h.finalize()[..12])
}

pub trait AssetSource: Send + Sync {
    fn shape(&self) -> InputShape;

    /// Makes sure the rendering exists and returns its token.
    fn prepare(&self, image_id: &str, epsilon: f64) -> Result<String>;

    /// Renders every listed pair, batching where possible.
    fn prepare_many(&self, items: &[(String, f64)]) -> Result<Vec<String>> {
        items.iter().map(|(id, e)| self.prepare(id, *e)).collect()
    }

    fn pixels(&self, token: &str) -> Option<Arc<Vec<f32>>>;

    fn png(&self, token: &str) -> Option<Result<Vec<u8>>> {
        let shape = self.shape();
        self.pixels(token).map(|p| encode_png(&p, shape))
    }
}

/// Serves dataset images, enhancing them with the guide model on demand.
pub struct EnhancingAssets {
    experiment_id: String,
    dataset: Arc<Dataset>,
    names: HashMap<String, usize>,
    model: Arc<GuideModel>,
    task_classes: Vec<usize>,
    alpha: f64,
    cache: Mutex<HashMap<String, Arc<Vec<f32>>>>,
}

impl EnhancingAssets {
    pub fn new(
        experiment_id: &str,
        dataset: Arc<Dataset>,
        model: Arc<GuideModel>,
        task_classes: Vec<usize>,
        alpha: f64,
    ) -> Self {
        let names = dataset
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        EnhancingAssets {
            experiment_id: experiment_id.to_string(),
            dataset,
            names,
            model,
            task_classes,
            alpha,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn cached(&self) -> usize {
        self.cache.lock().expect("asset cache lock").len()
    }

    fn render_natural(&self, image_id: &str) -> Result<Vec<f32>> {
        if let Some(shape) = image_id.strip_prefix(ATTENTION_PREFIX) {
            let shape = match shape {
                "circle" => CheckShape::Circle,
                "triangle" => CheckShape::Triangle,
                other => return Err(Error::UnknownImage(format!("{ATTENTION_PREFIX}{other}"))),
            };
            let s = self.dataset.shape;
            if s.height != s.width || s.channels != 3 {
                return Err(Error::invalid("attention images need square RGB assets"));
            }
            return Ok(attention_image(shape, s.height));
        }
        let &i = self
            .names
            .get(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))?;
        Ok(self.dataset.samples[i].pixels.clone())
    }

    /// Writes the cache as `(token, pixels)` records.
    pub fn save_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let cache = self.cache.lock().expect("asset cache lock");
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut keys: Vec<&String> = cache.keys().collect();
        keys.sort();
        w.write_u64::<LittleEndian>(keys.len() as u64)?;
        for k in keys {
            let px = &cache[k];
            w.write_u32::<LittleEndian>(k.len() as u32)?;
            w.write_all(k.as_bytes())?;
            w.write_u32::<LittleEndian>(px.len() as u32)?;
            for &v in px.iter() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_cache(&self, path: impl AsRef<Path>) -> Result<usize> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let n = r.read_u64::<LittleEndian>()?;
        let mut cache = self.cache.lock().expect("asset cache lock");
        for _ in 0..n {
            let klen = r.read_u32::<LittleEndian>()? as usize;
            let mut k = vec![0u8; klen];
            r.read_exact(&mut k)?;
            let plen = r.read_u32::<LittleEndian>()? as usize;
            if plen != self.dataset.shape.len() {
                return Err(Error::invalid("asset cache does not match the dataset shape"));
            }
            let mut px = vec![0f32; plen];
            r.read_f32_into::<LittleEndian>(&mut px)?;
            let k = String::from_utf8(k).map_err(|e| Error::invalid(e.to_string()))?;
            cache.insert(k, Arc::new(px));
        }
        Ok(n as usize)
    }
}

impl AssetSource for EnhancingAssets {
    fn shape(&self) -> InputShape {
        self.dataset.shape
    }

    fn prepare(&self, image_id: &str, epsilon: f64) -> Result<String> {
        Ok(self.prepare_many(&[(image_id.to_string(), epsilon)])?.remove(0))
    }

    fn prepare_many(&self, items: &[(String, f64)]) -> Result<Vec<String>> {
        let tokens: Vec<String> = items
            .iter()
            .map(|(id, e)| asset_token(&self.experiment_id, id, *e))
            .collect();
        let missing: Vec<usize> = {
            let cache = self.cache.lock().expect("asset cache lock");
            let mut seen = std::collections::HashSet::new();
            (0..items.len())
                .filter(|&i| !cache.contains_key(&tokens[i]) && seen.insert(tokens[i].clone()))
                .collect()
        };
        // group by budget so each enhancement batch shares one config
        let mut by_eps: Vec<(f64, Vec<usize>)> = Vec::new();
        for &i in &missing {
            let e = items[i].1;
            match by_eps.iter_mut().find(|(x, _)| *x == e) {
                Some((_, v)) => v.push(i),
                None => by_eps.push((e, vec![i])),
            }
        }
        let mut rendered = Vec::with_capacity(missing.len());
        for (eps, idx) in by_eps {
            if eps == 0.0 || idx.iter().any(|&i| items[i].0.starts_with(ATTENTION_PREFIX)) {
                for &i in &idx {
                    let px = self.render_natural(&items[i].0)?;
                    if eps != 0.0 && items[i].0.starts_with(ATTENTION_PREFIX) {
                        return Err(Error::invalid("attention images are never enhanced"));
                    }
                    rendered.push((tokens[i].clone(), px));
                }
                if eps == 0.0 {
                    continue;
                }
            }
            let cfg = EnhanceConfig::new(eps, self.alpha);
            for chunk in idx.chunks(64) {
                let mut px = Vec::with_capacity(chunk.len() * self.dataset.shape.len());
                let mut gts = Vec::with_capacity(chunk.len());
                let mut refs = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let &s = self
                        .names
                        .get(&items[i].0)
                        .ok_or_else(|| Error::UnknownImage(items[i].0.clone()))?;
                    px.extend_from_slice(&self.dataset.samples[s].pixels);
                    gts.push(self.dataset.samples[s].class);
                    refs.push(items[i].0.clone());
                }
                let out = enhance_batch(&self.model, &refs, &px, &gts, &self.task_classes, &cfg)?;
                for (&i, e) in chunk.iter().zip(out) {
                    rendered.push((tokens[i].clone(), e.pixels.into_data()));
                }
            }
        }
        let mut cache = self.cache.lock().expect("asset cache lock");
        for (t, px) in rendered {
            cache.insert(t, Arc::new(px));
        }
        Ok(tokens)
    }

    fn pixels(&self, token: &str) -> Option<Arc<Vec<f32>>> {
        self.cache.lock().expect("asset cache lock").get(token).cloned()
    }
}
