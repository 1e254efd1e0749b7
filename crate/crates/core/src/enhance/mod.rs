//! Category-percept enhancement by projected gradient ascent on the guide
//! model's ground-truth logit, plus heat maps and a CLAHE baseline.

pub mod clahe;
pub mod heatmap;
pub mod projection;

use serde::{Deserialize, Serialize};

pub use clahe::clahe_baseline;
pub use heatmap::{average_heatmap, make_heatmap, Heatmap};
pub use projection::project_l2;

use crate::error::{Error, Result};
use crate::tensornet::{GuideModel, Objective, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Raise the ground-truth logit (optionally suppressing competitors).
    MaximizeGt,
    /// Lower it: the "disrupted" control.
    MinimizeGt,
    /// Descend cross-entropy instead of ascending the logit.
    MinimizeCrossEntropy,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maximize_gt" | "enhance" => Ok(Direction::MaximizeGt),
            "minimize_gt" | "disrupt" => Ok(Direction::MinimizeGt),
            "minimize_cross_entropy" | "min_ce" => Ok(Direction::MinimizeCrossEntropy),
            other => Err(Error::invalid(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhanceConfig {
    /// L2 budget, in raw `[0, 1]` pixel units of the model's input resolution.
    pub epsilon: f64,
    /// Weight on suppressing competing-class logits.
    pub alpha: f64,
    pub step_size: f64,
    /// `None` means `ceil(2 * epsilon)`.
    pub steps: Option<usize>,
    pub direction: Direction,
}

impl EnhanceConfig {
    pub fn new(epsilon: f64, alpha: f64) -> Self {
        EnhanceConfig {
            epsilon,
            alpha,
            step_size: 0.5,
            steps: None,
            direction: Direction::MaximizeGt,
        }
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn steps(&self) -> usize {
        self.steps
            .unwrap_or_else(|| (2.0 * self.epsilon).ceil().max(0.0) as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::invalid("step size must be > 0"));
        }
        if self.steps == Some(0) {
            return Err(Error::invalid("explicit step count must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancedImage {
    pub original_ref: String,
    pub pixels: Tensor<f32>,
    /// Achieved `|x' - x|_2`.
    pub delta_norm: f64,
    pub config: EnhanceConfig,
    pub steps_run: usize,
    pub gt_logit_before: f64,
    pub gt_logit_after: f64,
}

/// Enhances one image; see [`enhance_batch`].
pub fn enhance_image(
    model: &GuideModel,
    original_ref: &str,
    image: &Tensor<f32>,
    gt: usize,
    task_classes: &[usize],
    cfg: &EnhanceConfig,
) -> Result<EnhancedImage> {
    let mut out = enhance_batch(
        model,
        &[original_ref.to_string()],
        image.data(),
        &[gt],
        task_classes,
        cfg,
    )?;
    let mut e = out.pop().expect("one result per image");
    e.pixels = Tensor::new(image.shape().to_vec(), e.pixels.into_data())?;
    Ok(e)
}

/// Runs `cfg.steps()` projected steps per image of size `cfg.step_size` along
/// the normalised gradient of
/// `L_gt(x + d) - alpha / (|C| - 1) * sum_{c in C, c != gt} L_c(x + d)`
/// (`C = task_classes`), or its negation / cross-entropy per `cfg.direction`.
/// After each step the perturbation is projected onto the `epsilon` ball and
/// pixels are clamped to `[0, 1]`.
pub fn enhance_batch(
    model: &GuideModel,
    refs: &[String],
    pixels: &[f32],
    gts: &[usize],
    task_classes: &[usize],
    cfg: &EnhanceConfig,
) -> Result<Vec<EnhancedImage>> {
    cfg.validate()?;
    let n = model.input_len();
    if pixels.len() != gts.len() * n || refs.len() != gts.len() {
        return Err(Error::Shape {
            context: "enhance batch",
            expected: vec![gts.len(), n],
            actual: vec![refs.len(), pixels.len()],
        });
    }
    if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("enhancement input pixels must lie in [0, 1]"));
    }
    if cfg.alpha > 0.0 && task_classes.len() < 2 {
        return Err(Error::invalid(
            "alpha > 0 needs at least two task classes (|C| - 1 would be zero)",
        ));
    }
    let objectives = gts
        .iter()
        .map(|&gt| {
            if !task_classes.contains(&gt) {
                return Err(Error::invalid(format!(
                    "class {gt} not among task classes {task_classes:?}"
                )));
            }
            let o = match cfg.direction {
                Direction::MaximizeGt | Direction::MinimizeGt => Objective::GtMargin {
                    gt,
                    alpha: cfg.alpha,
                    classes: Some(task_classes.to_vec()),
                },
                Direction::MinimizeCrossEntropy => Objective::CrossEntropy { gt },
            };
            o.validate(model.class_count())?;
            Ok(o)
        })
        .collect::<Result<Vec<_>>>()?;
    let sign: f32 = match cfg.direction {
        Direction::MaximizeGt => 1.0,
        Direction::MinimizeGt | Direction::MinimizeCrossEntropy => -1.0,
    };

    let batch = gts.len();
    let k = model.class_count();
    let before = model.trace(pixels, batch).logits().to_vec();
    let mut adv = pixels.to_vec();
    let mut delta = vec![0f32; pixels.len()];
    let steps = cfg.steps();
    if cfg.epsilon > 0.0 {
        for _ in 0..steps {
            let (mut grads, _, _) = model.input_gradients(&adv, &objectives)?;
            if sign < 0.0 {
                grads.iter_mut().for_each(|g| *g = -*g);
            }
            for i in 0..batch {
                let r = i * n..(i + 1) * n;
                projection::ascent_step(
                    &pixels[r.clone()],
                    &mut delta[r.clone()],
                    &grads[r.clone()],
                    cfg.step_size,
                    cfg.epsilon,
                    &mut adv[r],
                );
            }
        }
    }
    let after = if cfg.epsilon > 0.0 {
        model.trace(&adv, batch).logits().to_vec()
    } else {
        before.clone()
    };
    let s = model.spec().input_shape;
    (0..batch)
        .map(|i| {
            let r = i * n..(i + 1) * n;
            Ok(EnhancedImage {
                original_ref: refs[i].clone(),
                delta_norm: projection::realised_norm(&pixels[r.clone()], &adv[r.clone()]),
                pixels: Tensor::new(vec![s.channels, s.height, s.width], adv[r].to_vec())?,
                config: *cfg,
                steps_run: if cfg.epsilon > 0.0 { steps } else { 0 },
                gt_logit_before: before[i * k + gts[i]] as f64,
                gt_logit_after: after[i * k + gts[i]] as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_step_count_is_ceil_two_epsilon() {
        assert_eq!(EnhanceConfig::new(8.0, 0.0).steps(), 16);
        assert_eq!(EnhanceConfig::new(0.25, 0.0).steps(), 1);
        assert_eq!(EnhanceConfig::new(2.6, 0.0).steps(), 6);
        assert_eq!(EnhanceConfig::new(20.0, 1.0).steps(), 40);
    }

    #[test]
    fn directions_parse() {
        assert_eq!("minimize_gt".parse::<Direction>().unwrap(), Direction::MinimizeGt);
        assert!("sideways".parse::<Direction>().is_err());
    }
}
