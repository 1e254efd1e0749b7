use super::network::{argmax, Network, Objective};
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// A minibatch of images in CHW layout, concatenated.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub pixels: Vec<T>,
    pub labels: Vec<usize>,
    /// Dataset-wide index of each image, used for per-image bookkeeping.
    pub ids: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// Whether the pre-update model predicted each image correctly.
    pub correct: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub mean_loss: f64,
    /// `(image id, predicted correctly before its update)` in visit order.
    pub correct: Vec<(usize, bool)>,
}

impl<T: Scalar> Network<T> {
    /// One plain SGD step on mean cross-entropy with L2 weight decay.
    pub fn sgd_step(&mut self, pixels: &[T], labels: &[usize], lr: f64, weight_decay: f64) -> Result<StepReport> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
        }
        let batch = labels.len();
        if batch == 0 || pixels.len() != batch * self.input_len() {
            return Err(Error::Shape {
                context: "sgd_step batch",
                expected: vec![batch, self.input_len()],
                actual: vec![pixels.len()],
            });
        }
        let k = self.class_count();
        let trace = self.trace(pixels, batch);
        let mut d_logits = Vec::with_capacity(batch * k);
        let mut loss = 0.0;
        let mut correct = Vec::with_capacity(batch);
        let inv_b = T::lit(1.0 / batch as f64);
        for (i, &y) in labels.iter().enumerate() {
            let objective = Objective::CrossEntropy { gt: y };
            objective.validate(k)?;
            let row = trace.logits_row(i);
            correct.push(argmax(row) == y);
            let (l, g) = objective.value_and_grad(row);
            loss += l;
            d_logits.extend(g.into_iter().map(|v| v * inv_b));
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { batch: 0 });
        }
        if lr == 0.0 {
            return Ok(StepReport { loss, correct });
        }
        let mut grad = vec![T::zero(); self.weights().len()];
        self.backward(&trace, &d_logits, Some(&mut grad), false);
        let lr_t = T::lit(lr);
        let wd = T::lit(weight_decay);
        for (w, g) in self.weights_mut().iter_mut().zip(&grad) {
            *w -= lr_t * (*g + wd * *w);
        }
        Ok(StepReport { loss, correct })
    }

    /// Runs [`Network::sgd_step`] over every batch in order.
    pub fn sgd_epoch(&mut self, batches: &[Batch<T>], lr: f64, weight_decay: f64) -> Result<EpochReport> {
        let mut total = 0.0;
        let mut seen = 0usize;
        let mut correct = Vec::new();
        for (bi, b) in batches.iter().enumerate() {
            let report = self
                .sgd_step(&b.pixels, &b.labels, lr, weight_decay)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { batch: bi },
                    other => other,
                })?;
            total += report.loss * b.len() as f64;
            seen += b.len();
            correct.extend(b.ids.iter().copied().zip(report.correct));
        }
        Ok(EpochReport {
            mean_loss: if seen == 0 { 0.0 } else { total / seen as f64 },
            correct,
        })
    }
}
