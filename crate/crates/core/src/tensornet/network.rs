use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{compile, ConvGeom, NetworkSpec, Op};
use super::tensor::{gemm, Scalar, Tensor, View};
use crate::error::{Error, Result};

/// Per-channel affine normalization applied ahead of the first layer.
///
/// Living inside the model means input gradients are taken with respect to raw
/// `[0, 1]` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Per-channel mean and standard deviation over a set of CHW images.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a [f32]>, channels: usize) -> Self {
        let mut sum = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        let mut count = 0usize;
        for img in images {
            let plane = img.len() / channels;
            for c in 0..channels {
                for &v in &img[c * plane..(c + 1) * plane] {
                    let v = v as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += plane;
        }
        if count == 0 {
            return Normalization::identity(channels);
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Normalization { mean, std }
    }
}

/// What the input gradient is taken of.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// `L_gt - alpha / (|C| - 1) * sum_{c in C, c != gt} L_c`, where `C` is
    /// `classes` (all model classes when `None`).
    GtMargin {
        gt: usize,
        alpha: f64,
        classes: Option<Vec<usize>>,
    },
    /// Softmax cross-entropy against `gt`.
    CrossEntropy { gt: usize },
}

impl Objective {
    pub fn gt_logit(gt: usize) -> Self {
        Objective::GtMargin {
            gt,
            alpha: 0.0,
            classes: None,
        }
    }

    pub fn gt(&self) -> usize {
        match self {
            Objective::GtMargin { gt, .. } | Objective::CrossEntropy { gt } => *gt,
        }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        let gt = self.gt();
        if gt >= class_count {
            return Err(Error::InvalidClass {
                index: gt,
                classes: class_count,
            });
        }
        if let Objective::GtMargin {
            alpha,
            classes: Some(classes),
            ..
        } = self
        {
            if let Some(&bad) = classes.iter().find(|&&c| c >= class_count) {
                return Err(Error::InvalidClass {
                    index: bad,
                    classes: class_count,
                });
            }
            if !classes.contains(&gt) {
                return Err(Error::invalid(format!(
                    "ground-truth class {gt} not among competing classes {classes:?}"
                )));
            }
            if classes.len() < 2 && *alpha > 0.0 {
                return Err(Error::invalid("alpha > 0 needs at least two classes in the objective"));
            }
        }
        if let Objective::GtMargin { alpha, .. } = self {
            if !(alpha.is_finite() && *alpha >= 0.0) {
                return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
            }
        }
        Ok(())
    }

    /// Objective value and its derivative with respect to the logits.
    pub fn value_and_grad<T: Scalar>(&self, logits: &[T]) -> (f64, Vec<T>) {
        let k = logits.len();
        match self {
            Objective::GtMargin { gt, alpha, classes } => {
                let mut grad = vec![T::zero(); k];
                grad[*gt] = T::one();
                let mut value = logits[*gt].to_f64().unwrap_or(f64::NAN);
                if *alpha > 0.0 {
                    let all: Vec<usize>;
                    let set = match classes {
                        Some(c) => c.as_slice(),
                        None => {
                            all = (0..k).collect();
                            &all
                        }
                    };
                    let w = alpha / (set.len() - 1) as f64;
                    for &c in set.iter().filter(|&&c| c != *gt) {
                        value -= w * logits[c].to_f64().unwrap_or(f64::NAN);
                        grad[c] -= T::lit(w);
                    }
                }
                (value, grad)
            }
            Objective::CrossEntropy { gt } => {
                let probs = softmax(logits);
                let lse = log_sum_exp(logits);
                let value = lse - logits[*gt].to_f64().unwrap_or(f64::NAN);
                let mut grad: Vec<T> = probs.iter().map(|&p| T::lit(p)).collect();
                grad[*gt] -= T::one();
                (value, grad)
            }
        }
    }
}

pub fn log_sum_exp<T: Scalar>(logits: &[T]) -> f64 {
    let xs: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits
        .iter()
        .map(|v| (v.to_f64().unwrap_or(f64::NAN) - lse).exp())
        .collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Activations retained from a forward pass for the backward pass.
pub struct Trace<T> {
    batch: usize,
    /// `acts[i]` is the input of op `i`; the last entry holds the logits.
    acts: Vec<Vec<T>>,
    cols: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Trace<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn logits(&self) -> &[T] {
        self.acts.last().expect("trace has output")
    }

    pub fn logits_row(&self, i: usize) -> &[T] {
        let out = self.logits();
        let k = out.len() / self.batch;
        &out[i * k..(i + 1) * k]
    }
}

/// Feed-forward convolutional classifier with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Scalar = f32> {
    spec: NetworkSpec,
    ops: Vec<Op>,
    params: Vec<T>,
    normalization: Normalization,
}

/// The differentiable classifier that scores and enhances images.
pub type GuideModel = Network<f32>;

impl<T: Scalar> Network<T> {
    /// Seeded uniform fan-in initialisation; biases start at zero.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Network::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ops = net.ops.clone();
        let last_dense = ops.iter().rposition(|op| matches!(op, Op::Dense { .. }));
        for (i, op) in ops.iter().enumerate() {
            let (off, count, fan_in) = match *op {
                Op::Conv(g) => (g.w_off, g.out_c * g.patch(), g.patch()),
                Op::Dense {
                    inputs, outputs, w_off, ..
                } => (w_off, inputs * outputs, inputs),
                _ => continue,
            };
            // rectified layers get the wider He bound, the read-out the plain one
            let gain = if Some(i) == last_dense { 3.0 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt();
            for w in &mut net.params[off..off + count] {
                *w = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        let (ops, count) = compile(&spec)?;
        let channels = spec.input_shape.channels;
        Ok(Network {
            spec,
            ops,
            params: vec![T::zero(); count],
            normalization: Normalization::identity(channels),
        })
    }

    pub fn from_parts(spec: NetworkSpec, normalization: Normalization, weights: Vec<T>) -> Result<Self> {
        let (ops, count) = compile(&spec)?;
        if weights.len() != count {
            return Err(Error::Shape {
                context: "weight vector",
                expected: vec![count],
                actual: vec![weights.len()],
            });
        }
        let c = spec.input_shape.channels;
        if normalization.mean.len() != c || normalization.std.len() != c {
            return Err(Error::Shape {
                context: "normalization constants",
                expected: vec![c],
                actual: vec![normalization.mean.len(), normalization.std.len()],
            });
        }
        if normalization.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidSpec("normalization std must be positive".into()));
        }
        Ok(Network {
            spec,
            ops,
            params: weights,
            normalization,
        })
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Result<Self> {
        let weights = std::mem::take(&mut self.params);
        Network::from_parts(self.spec, normalization, weights)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_shape.len()
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn weights(&self) -> &[T] {
        &self.params
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            ops: self.ops.clone(),
            params: self
                .params
                .iter()
                .map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
            normalization: self.normalization.clone(),
        }
    }

    /// Number of images in `images`, checking the per-image extent.
    fn batch_of(&self, images: &Tensor<T>) -> Result<usize> {
        let s = self.spec.input_shape;
        let per = [s.channels, s.height, s.width];
        let shape = images.shape();
        let ok = match shape.len() {
            3 => shape == per,
            4 => shape[1..] == per,
            _ => false,
        };
        if !ok {
            return Err(Error::Shape {
                context: "network input",
                expected: vec![s.channels, s.height, s.width],
                actual: shape.to_vec(),
            });
        }
        Ok(if shape.len() == 3 { 1 } else { shape[0] })
    }

    /// Pre-softmax logits, `[batch, class_count]`.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.batch_of(images)?;
        let trace = self.trace(images.data(), batch);
        let logits = Tensor::new(vec![batch, self.class_count()], trace.acts.last().unwrap().clone())?;
        logits.ensure_finite("forward")?;
        Ok(logits)
    }

    /// Activations feeding the final dense layer, `[batch, width]`.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.batch_of(images)?;
        let trace = self.trace(images.data(), batch);
        let idx = self
            .ops
            .iter()
            .rposition(|op| matches!(op, Op::Dense { .. }))
            .expect("compiled network has a dense layer");
        let width = self.ops[idx].input_len();
        Tensor::new(vec![batch, width], trace.acts[idx].clone())
    }

    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.forward(images)?;
        let k = self.class_count();
        Ok(logits.data().chunks(k).map(argmax).collect())
    }

    /// Which rectifier units are active in `trace`, concatenated over layers.
    ///
    /// Two inputs with the same pattern lie in the same linear region of the
    /// network, which is what gradient checks need to know.
    pub fn rectifier_pattern(&self, trace: &Trace<T>) -> Vec<bool> {
        self.ops
            .iter()
            .enumerate()
            .filter(|(_, op)| matches!(op, Op::Relu { .. }))
            .flat_map(|(i, _)| trace.acts[i + 1].iter().map(|v| *v > T::zero()))
            .collect()
    }

    /// Forward pass retaining what [`Network::backward`] needs.
    pub fn trace(&self, pixels: &[T], batch: usize) -> Trace<T> {
        let in_len = self.input_len();
        assert_eq!(pixels.len(), batch * in_len, "trace: pixel buffer length");
        let plane = self.spec.input_shape.plane();
        let mut x = Vec::with_capacity(pixels.len());
        for img in pixels.chunks(in_len) {
            for (c, chan) in img.chunks(plane).enumerate() {
                let m = T::lit(self.normalization.mean[c]);
                let inv = T::lit(1.0 / self.normalization.std[c]);
                x.extend(chan.iter().map(|&v| (v - m) * inv));
            }
        }
        let mut acts = Vec::with_capacity(self.ops.len() + 1);
        let mut cols = Vec::with_capacity(self.ops.len());
        acts.push(x);
        for op in &self.ops {
            let input = acts.last().unwrap();
            let (out, col) = self.forward_op(op, input, batch);
            acts.push(out);
            cols.push(col);
        }
        Trace { batch, acts, cols }
    }

    fn forward_op(&self, op: &Op, x: &[T], batch: usize) -> (Vec<T>, Option<Vec<T>>) {
        match *op {
            Op::Conv(g) => {
                let (kdim, p) = (g.patch(), g.positions());
                let mut cols = vec![T::zero(); batch * kdim * p];
                let mut out = vec![T::zero(); batch * g.out_c * p];
                let w = &self.params[g.w_off..g.w_off + g.out_c * kdim];
                let bias = &self.params[g.b_off..g.b_off + g.out_c];
                let in_len = g.in_c * g.in_h * g.in_w;
                for b in 0..batch {
                    let col = &mut cols[b * kdim * p..(b + 1) * kdim * p];
                    im2col(&g, &x[b * in_len..(b + 1) * in_len], col);
                    let o = &mut out[b * g.out_c * p..(b + 1) * g.out_c * p];
                    gemm(g.out_c, kdim, p, View::rows(w, kdim), View::rows(col, p), T::zero(), o);
                    for (row, &bv) in o.chunks_mut(p).zip(bias) {
                        row.iter_mut().for_each(|v| *v += bv);
                    }
                }
                (out, Some(cols))
            }
            Op::Dense {
                inputs,
                outputs,
                w_off,
                b_off,
            } => {
                let w = &self.params[w_off..w_off + inputs * outputs];
                let bias = &self.params[b_off..b_off + outputs];
                let mut out = vec![T::zero(); batch * outputs];
                gemm(
                    batch,
                    inputs,
                    outputs,
                    View::rows(x, inputs),
                    View::t(w, inputs),
                    T::zero(),
                    &mut out,
                );
                for row in out.chunks_mut(outputs) {
                    row.iter_mut().zip(bias).for_each(|(v, &bv)| *v += bv);
                }
                (out, None)
            }
            Op::Relu { .. } => (x.iter().map(|&v| v.max(T::zero())).collect(), None),
            Op::AvgPool {
                channels,
                in_h,
                in_w,
                size,
                out_h,
                out_w,
            } => {
                let scale = T::lit(1.0 / (size * size) as f64);
                let in_len = channels * in_h * in_w;
                let mut out = vec![T::zero(); batch * channels * out_h * out_w];
                for b in 0..batch {
                    let src = &x[b * in_len..(b + 1) * in_len];
                    let dst = &mut out[b * channels * out_h * out_w..(b + 1) * channels * out_h * out_w];
                    for c in 0..channels {
                        for oy in 0..out_h {
                            for ox in 0..out_w {
                                let mut acc = T::zero();
                                for dy in 0..size {
                                    for dx in 0..size {
                                        acc += src[(c * in_h + oy * size + dy) * in_w + ox * size + dx];
                                    }
                                }
                                dst[(c * out_h + oy) * out_w + ox] = acc * scale;
                            }
                        }
                    }
                }
                (out, None)
            }
        }
    }

    /// Reverse pass from `d_logits` (`[batch, class_count]`).
    ///
    /// Accumulates into `param_grad` when given and returns the gradient with
    /// respect to the raw input pixels when `want_input` is set (otherwise an
    /// empty vector).
    pub fn backward(
        &self,
        trace: &Trace<T>,
        d_logits: &[T],
        mut param_grad: Option<&mut [T]>,
        want_input: bool,
    ) -> Vec<T> {
        let batch = trace.batch;
        assert_eq!(d_logits.len(), batch * self.class_count(), "backward: d_logits length");
        if let Some(g) = param_grad.as_deref() {
            assert_eq!(g.len(), self.params.len(), "backward: param_grad length");
        }
        let mut grad = d_logits.to_vec();
        for (i, op) in self.ops.iter().enumerate().rev() {
            let need_dx = want_input || i > 0;
            let x = &trace.acts[i];
            let y = &trace.acts[i + 1];
            grad = self.backward_op(
                op,
                x,
                y,
                trace.cols[i].as_deref(),
                &grad,
                batch,
                param_grad.as_deref_mut(),
                need_dx,
            );
            if !need_dx {
                return Vec::new();
            }
        }
        let in_len = self.input_len();
        let plane = self.spec.input_shape.plane();
        for img in grad.chunks_mut(in_len) {
            for (c, chan) in img.chunks_mut(plane).enumerate() {
                let inv = T::lit(1.0 / self.normalization.std[c]);
                chan.iter_mut().for_each(|v| *v *= inv);
            }
        }
        grad
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_op(
        &self,
        op: &Op,
        x: &[T],
        y: &[T],
        cols: Option<&[T]>,
        dy: &[T],
        batch: usize,
        param_grad: Option<&mut [T]>,
        need_dx: bool,
    ) -> Vec<T> {
        match *op {
            Op::Conv(g) => {
                let cols = cols.expect("conv trace keeps im2col buffer");
                let (kdim, p) = (g.patch(), g.positions());
                let in_len = g.in_c * g.in_h * g.in_w;
                let w = &self.params[g.w_off..g.w_off + g.out_c * kdim];
                if let Some(pg) = param_grad {
                    for b in 0..batch {
                        let d = &dy[b * g.out_c * p..(b + 1) * g.out_c * p];
                        let col = &cols[b * kdim * p..(b + 1) * kdim * p];
                        let dw = &mut pg[g.w_off..g.w_off + g.out_c * kdim];
                        gemm(g.out_c, p, kdim, View::rows(d, p), View::t(col, p), T::one(), dw);
                        for (oc, row) in d.chunks(p).enumerate() {
                            pg[g.b_off + oc] += row.iter().copied().sum::<T>();
                        }
                    }
                }
                if !need_dx {
                    return Vec::new();
                }
                let mut dx = vec![T::zero(); batch * in_len];
                let mut dcol = vec![T::zero(); kdim * p];
                for b in 0..batch {
                    let d = &dy[b * g.out_c * p..(b + 1) * g.out_c * p];
                    gemm(
                        kdim,
                        g.out_c,
                        p,
                        View::t(w, kdim),
                        View::rows(d, p),
                        T::zero(),
                        &mut dcol,
                    );
                    col2im(&g, &dcol, &mut dx[b * in_len..(b + 1) * in_len]);
                }
                dx
            }
            Op::Dense {
                inputs,
                outputs,
                w_off,
                b_off,
            } => {
                let w = &self.params[w_off..w_off + inputs * outputs];
                if let Some(pg) = param_grad {
                    gemm(
                        outputs,
                        batch,
                        inputs,
                        View::t(dy, outputs),
                        View::rows(x, inputs),
                        T::one(),
                        &mut pg[w_off..w_off + inputs * outputs],
                    );
                    for row in dy.chunks(outputs) {
                        for (o, &d) in row.iter().enumerate() {
                            pg[b_off + o] += d;
                        }
                    }
                }
                if !need_dx {
                    return Vec::new();
                }
                let mut dx = vec![T::zero(); batch * inputs];
                gemm(
                    batch,
                    outputs,
                    inputs,
                    View::rows(dy, outputs),
                    View::rows(w, inputs),
                    T::zero(),
                    &mut dx,
                );
                dx
            }
            Op::Relu { .. } => dy
                .iter()
                .zip(y)
                .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                .collect(),
            Op::AvgPool {
                channels,
                in_h,
                in_w,
                size,
                out_h,
                out_w,
            } => {
                let _ = x;
                let scale = T::lit(1.0 / (size * size) as f64);
                let in_len = channels * in_h * in_w;
                let out_len = channels * out_h * out_w;
                let mut dx = vec![T::zero(); batch * in_len];
                for b in 0..batch {
                    let src = &dy[b * out_len..(b + 1) * out_len];
                    let dst = &mut dx[b * in_len..(b + 1) * in_len];
                    for c in 0..channels {
                        for oy in 0..out_h {
                            for ox in 0..out_w {
                                let d = src[(c * out_h + oy) * out_w + ox] * scale;
                                for dy_ in 0..size {
                                    for dx_ in 0..size {
                                        dst[(c * in_h + oy * size + dy_) * in_w + ox * size + dx_] += d;
                                    }
                                }
                            }
                        }
                    }
                }
                dx
            }
        }
    }

    /// d(objective)/d(pixels) at a single image (`[C, H, W]` or `[1, C, H, W]`).
    pub fn input_gradient(&self, image: &Tensor<T>, objective: &Objective) -> Result<Tensor<T>> {
        let batch = self.batch_of(image)?;
        if batch != 1 {
            return Err(Error::Shape {
                context: "input_gradient expects one image",
                expected: vec![1],
                actual: vec![batch],
            });
        }
        let (grads, _, _) = self.input_gradients(image.data(), std::slice::from_ref(objective))?;
        Tensor::new(image.shape().to_vec(), grads)
    }

    /// Batched input gradients: one objective per image.
    ///
    /// Returns `(gradients, objective values, logits)`.
    pub fn input_gradients(&self, pixels: &[T], objectives: &[Objective]) -> Result<(Vec<T>, Vec<f64>, Vec<T>)> {
        let batch = objectives.len();
        if pixels.len() != batch * self.input_len() {
            return Err(Error::Shape {
                context: "input_gradients pixel buffer",
                expected: vec![batch, self.input_len()],
                actual: vec![pixels.len()],
            });
        }
        let k = self.class_count();
        for o in objectives {
            o.validate(k)?;
        }
        let trace = self.trace(pixels, batch);
        let mut d_logits = Vec::with_capacity(batch * k);
        let mut values = Vec::with_capacity(batch);
        for (i, o) in objectives.iter().enumerate() {
            let (v, g) = o.value_and_grad(trace.logits_row(i));
            values.push(v);
            d_logits.extend(g);
        }
        let grads = self.backward(&trace, &d_logits, None, true);
        if !grads.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("input gradient"));
        }
        Ok((grads, values, trace.logits().to_vec()))
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.positions();
    let k = g.kernel;
    for c in 0..g.in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let p = g.positions();
    let k = g.kernel;
    for c in 0..g.in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
