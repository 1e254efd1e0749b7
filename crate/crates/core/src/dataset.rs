//! Labelled image collections and the on-disk image-folder layout
//! `<root>/<split>/<class>/<name>.png`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensornet::{InputShape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Unique, stable identifier (e.g. `train/dense-fine/0042`).
    pub name: String,
    pub class: usize,
    pub split: Split,
    /// CHW pixels in `[0, 1]`.
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: InputShape,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples in `split`, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.name == name)
    }

    pub fn name_index(&self) -> HashMap<&str, usize> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.as_str(), i))
            .collect()
    }

    pub fn image(&self, index: usize) -> Tensor<f32> {
        let s = self.shape;
        Tensor::new(vec![s.channels, s.height, s.width], self.samples[index].pixels.clone())
            .expect("sample pixels match dataset shape")
    }

    /// Stacks the given samples into one `[n, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let s = self.shape;
        let mut data = Vec::with_capacity(indices.len() * s.len());
        for &i in indices {
            data.extend_from_slice(&self.samples[i].pixels);
        }
        Tensor::new(vec![indices.len(), s.channels, s.height, s.width], data)
            .expect("sample pixels match dataset shape")
    }

    /// A copy with the train and test splits exchanged, so a model trained on
    /// it has a learning history for the test images.
    pub fn with_splits_swapped(&self) -> Dataset {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.split = match s.split {
                Split::Train => Split::Test,
                Split::Test => Split::Train,
                Split::Val => Split::Val,
            };
        }
        out
    }

    pub fn check_unique_names(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::DuplicateImage(s.name.clone()));
            }
        }
        Ok(())
    }

    /// Writes every sample as an 8-bit PNG under `root/<split>/<class>/`.
    pub fn save_folder(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        for s in &self.samples {
            let leaf = s.name.rsplit('/').next().unwrap_or(&s.name);
            let dir = root.join(s.split.as_str()).join(&self.class_names[s.class]);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("{leaf}.png"));
            to_rgb_image(&s.pixels, self.shape)?.save(&path).map_err(Error::from)?;
        }
        Ok(())
    }

    /// Loads `root/<split>/<class>/*.{png,jpg,jpeg}`. Classes are indexed by
    /// sorted directory name across all splits; images are resized so the
    /// shorter side matches `shape`, then centre-cropped.
    pub fn load_folder(root: impl AsRef<Path>, shape: InputShape) -> Result<Dataset> {
        let root = root.as_ref();
        let mut class_set = BTreeSet::new();
        let mut entries = Vec::new();
        for split_dir in read_dir_sorted(root)? {
            let Some(split_name) = split_dir.file_name().and_then(|n| n.to_str()).map(str::to_owned) else {
                continue;
            };
            let Ok(split) = split_name.parse::<Split>() else {
                continue;
            };
            if !split_dir.is_dir() {
                continue;
            }
            for class_dir in read_dir_sorted(&split_dir)? {
                if !class_dir.is_dir() {
                    continue;
                }
                let class = class_dir.file_name().unwrap().to_string_lossy().into_owned();
                class_set.insert(class.clone());
                for file in read_dir_sorted(&class_dir)? {
                    let ext = file
                        .extension()
                        .and_then(|e| e.to_str())
                        .map(|e| e.to_ascii_lowercase());
                    if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                        continue;
                    }
                    entries.push((split, class.clone(), file));
                }
            }
        }
        let class_names: Vec<String> = class_set.into_iter().collect();
        let mut samples = Vec::with_capacity(entries.len());
        for (split, class, path) in entries {
            let img = image::open(&path)?;
            let stem = path.file_stem().unwrap().to_string_lossy();
            samples.push(Sample {
                name: format!("{}/{}/{}", split, class, stem),
                class: class_names.iter().position(|c| *c == class).unwrap(),
                split,
                pixels: preprocess(&img, shape),
            });
        }
        let ds = Dataset {
            shape,
            class_names,
            samples,
        };
        ds.check_unique_names()?;
        Ok(ds)
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Shorter side resized to the target, centre crop, grey promoted to RGB,
/// pixels scaled by 1/255.
pub fn preprocess(img: &DynamicImage, shape: InputShape) -> Vec<f32> {
    let (w, h) = (img.width().max(1), img.height().max(1));
    let scale = (shape.width as f64 / w as f64).max(shape.height as f64 / h as f64);
    let nw = ((w as f64 * scale).round() as u32).max(shape.width as u32);
    let nh = ((h as f64 * scale).round() as u32).max(shape.height as u32);
    let rgb = img.to_rgb8();
    let resized = if (nw, nh) == (w, h) {
        rgb
    } else {
        image::imageops::resize(&rgb, nw, nh, FilterType::Triangle)
    };
    let x0 = (nw - shape.width as u32) / 2;
    let y0 = (nh - shape.height as u32) / 2;
    let plane = shape.plane();
    let mut out = vec![0f32; shape.len()];
    for y in 0..shape.height {
        for x in 0..shape.width {
            let p = resized.get_pixel(x0 + x as u32, y0 + y as u32);
            for c in 0..shape.channels.min(3) {
                out[c * plane + y * shape.width + x] = p[c] as f32 / 255.0;
            }
        }
    }
    out
}

/// CHW `[0, 1]` pixels to an 8-bit RGB image via `round(255 * v)`.
pub fn to_rgb_image(pixels: &[f32], shape: InputShape) -> Result<RgbImage> {
    if shape.channels != 3 || pixels.len() != shape.len() {
        return Err(Error::Shape {
            context: "RGB export",
            expected: vec![3, shape.height, shape.width],
            actual: vec![pixels.len()],
        });
    }
    let plane = shape.plane();
    Ok(RgbImage::from_fn(shape.width as u32, shape.height as u32, |x, y| {
        let i = y as usize * shape.width + x as usize;
        let q = |c: usize| (pixels[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    }))
}

pub fn encode_png(pixels: &[f32], shape: InputShape) -> Result<Vec<u8>> {
    let img = to_rgb_image(pixels, shape)?;
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Reads one image file and preprocesses it to `shape`.
pub fn load_image(path: impl AsRef<Path>, shape: InputShape) -> Result<Vec<f32>> {
    Ok(preprocess(&image::open(path.as_ref())?, shape))
}

pub fn save_png(pixels: &[f32], shape: InputShape, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_png(pixels, shape)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_255ths() {
        let shape = InputShape::new(4, 5, 3);
        let pixels: Vec<f32> = (0..shape.len()).map(|i| (i as f32 * 0.013) % 1.0).collect();
        let img = to_rgb_image(&pixels, shape).unwrap();
        let back = preprocess(&DynamicImage::ImageRgb8(img), shape);
        for (a, b) in pixels.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn preprocess_resizes_short_side_and_centre_crops() {
        // 8x4 image whose left and right quarters are red, centre green
        let img = RgbImage::from_fn(8, 4, |x, _| {
            if (2..6).contains(&x) {
                image::Rgb([0, 255, 0])
            } else {
                image::Rgb([255, 0, 0])
            }
        });
        let shape = InputShape::new(4, 4, 3);
        let out = preprocess(&DynamicImage::ImageRgb8(img), shape);
        // the crop keeps only the green centre
        assert!(out[..16].iter().all(|&v| v == 0.0));
        assert!(out[16..32].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grey_images_are_promoted_to_rgb() {
        let img = DynamicImage::ImageLuma8(image::GrayImage::from_pixel(2, 2, image::Luma([51])));
        let out = preprocess(&img, InputShape::new(2, 2, 3));
        assert!(out.iter().all(|&v| (v - 0.2).abs() < 1e-6));
    }
}
