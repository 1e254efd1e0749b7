//! Ground-truth-logit difficulty scores, the class-wise percentile index,
//! comparator metrics, and logistic-regression / AUC evaluation.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::dataset::{Dataset, Split};
use crate::enhance::projection::ascent_step;
use crate::error::{Error, Result};
use crate::robusttrain::TrainingHistory;
use crate::tensornet::{argmax, GuideModel, Objective, Tensor};

const EVAL_CHUNK: usize = 128;

/// One row of the index (also the CSV record).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyEntry {
    pub image_id: String,
    pub class: usize,
    pub split: Split,
    pub gt_logit: f64,
    /// 1-based rank within `(class, split)` under descending logit.
    pub rank: usize,
    /// `rank / n` for the cell: small is easy, 1.0 is the hardest.
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyIndex {
    entries: Vec<DifficultyEntry>,
    by_id: HashMap<String, usize>,
}

impl DifficultyIndex {
    /// Scores every image of `dataset` with `model` and ranks within cells.
    pub fn build(model: &GuideModel, dataset: &Dataset) -> Result<Self> {
        dataset.check_unique_names()?;
        let all: Vec<usize> = (0..dataset.len()).collect();
        let logits = gt_logits(model, dataset, &all)?;
        let present: Vec<Split> = [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .filter(|s| dataset.samples.iter().any(|x| x.split == *s))
            .collect();
        for &split in &present {
            for class in 0..dataset.class_count() {
                if !dataset.samples.iter().any(|s| s.split == split && s.class == class) {
                    return Err(Error::EmptyCell {
                        class,
                        split: split.to_string(),
                    });
                }
            }
        }
        Self::from_scores(
            dataset
                .samples
                .iter()
                .zip(logits)
                .map(|(s, l)| (s.name.clone(), s.class, s.split, l)),
        )
    }

    /// Ranks precomputed `(id, class, split, gt_logit)` rows. Ties are broken
    /// by image id, so the result does not depend on input order.
    pub fn from_scores(rows: impl IntoIterator<Item = (String, usize, Split, f64)>) -> Result<Self> {
        let mut entries: Vec<DifficultyEntry> = rows
            .into_iter()
            .map(|(image_id, class, split, gt_logit)| DifficultyEntry {
                image_id,
                class,
                split,
                gt_logit,
                rank: 0,
                d: 0.0,
            })
            .collect();
        if let Some(e) = entries.iter().find(|e| !e.gt_logit.is_finite()) {
            return Err(Error::invalid(format!("non-finite logit for {}", e.image_id)));
        }
        let mut cells: BTreeMap<(usize, Split), Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            cells.entry((e.class, e.split)).or_default().push(i);
        }
        for members in cells.values_mut() {
            members.sort_by(|&a, &b| {
                entries[b]
                    .gt_logit
                    .total_cmp(&entries[a].gt_logit)
                    .then_with(|| entries[a].image_id.cmp(&entries[b].image_id))
            });
            let n = members.len();
            for (r, &i) in members.iter().enumerate() {
                entries[i].rank = r + 1;
                entries[i].d = (r + 1) as f64 / n as f64;
            }
        }
        entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if by_id.insert(e.image_id.clone(), i).is_some() {
                return Err(Error::DuplicateImage(e.image_id.clone()));
            }
        }
        Ok(DifficultyIndex { entries, by_id })
    }

    /// Entries sorted by image id.
    pub fn entries(&self) -> &[DifficultyEntry] {
        &self.entries
    }

    pub fn get(&self, image_id: &str) -> Option<&DifficultyEntry> {
        self.by_id.get(image_id).map(|&i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries of one `(class, split)` cell, easiest first.
    pub fn cell(&self, class: usize, split: Split) -> Vec<&DifficultyEntry> {
        let mut v: Vec<_> = self
            .entries
            .iter()
            .filter(|e| e.class == class && e.split == split)
            .collect();
        v.sort_by_key(|e| e.rank);
        v
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for e in &self.entries {
            wr.serialize(e)?;
        }
        wr.flush().map_err(Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut entries = Vec::new();
        for row in rd.deserialize() {
            let e: DifficultyEntry = row?;
            entries.push(e);
        }
        entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if by_id.insert(e.image_id.clone(), i).is_some() {
                return Err(Error::DuplicateImage(e.image_id.clone()));
            }
        }
        Ok(DifficultyIndex { entries, by_id })
    }
}

/// Ground-truth logit of each listed sample.
pub fn gt_logits(model: &GuideModel, dataset: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    let k = model.class_count();
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let logits = model.forward(&dataset.batch(chunk))?;
        for (row, &i) in logits.data().chunks(k).zip(chunk) {
            let c = dataset.samples[i].class;
            if c >= k {
                return Err(Error::InvalidClass { index: c, classes: k });
            }
            out.push(row[c] as f64);
        }
    }
    Ok(out)
}

/// Epoch (1-based) at which each training image was first classified
/// correctly; `f64::INFINITY` if never.
pub fn cscore_proxy(history: &TrainingHistory) -> Result<BTreeMap<String, f64>> {
    if history.correct.is_empty() {
        return Err(Error::invalid("training history has no epochs"));
    }
    let mut out = BTreeMap::new();
    for (j, name) in history.image_names.iter().enumerate() {
        let first = history
            .correct
            .iter()
            .position(|row| row.get(j).copied().unwrap_or(false))
            .map_or(f64::INFINITY, |e| (e + 1) as f64);
        out.insert(name.clone(), first);
    }
    Ok(out)
}

/// C-score proxies for the given ids, erroring on any id not in `history`.
pub fn cscore_for(history: &TrainingHistory, ids: &[&str]) -> Result<Vec<f64>> {
    let all = cscore_proxy(history)?;
    ids.iter()
        .map(|id| all.get(*id).copied().ok_or_else(|| Error::UnknownImage(id.to_string())))
        .collect()
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipSearch {
    /// Candidate budgets, ascending.
    pub grid: Vec<f64>,
    pub steps: usize,
    /// Step size as a multiple of `epsilon / steps`.
    pub relative_step: f64,
}

impl Default for FlipSearch {
    fn default() -> Self {
        FlipSearch {
            grid: log_grid(0.05, 5.0, 17),
            steps: 10,
            relative_step: 2.5,
        }
    }
}

/// Smallest grid budget whose L2 PGD attack changes the prediction: 0 if the
/// image is already misclassified, infinity if no grid budget flips it.
pub fn min_flip_epsilon(model: &GuideModel, image: &Tensor<f32>, label: usize, search: &FlipSearch) -> Result<f64> {
    Ok(min_flip_epsilon_batch(model, image.data(), &[label], search)?[0])
}

/// Batched binary search: every image is attacked at its own current
/// midpoint budget in each round.
pub fn min_flip_epsilon_batch(
    model: &GuideModel,
    pixels: &[f32],
    labels: &[usize],
    search: &FlipSearch,
) -> Result<Vec<f64>> {
    let grid = &search.grid;
    if grid.is_empty() {
        return Err(Error::invalid("empty epsilon grid"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) || grid[0] <= 0.0 {
        return Err(Error::invalid("epsilon grid must be positive and strictly ascending"));
    }
    if search.steps == 0 || !(search.relative_step > 0.0) {
        return Err(Error::invalid("flip search needs positive steps and step size"));
    }
    let n = model.input_len();
    let b = labels.len();
    if pixels.len() != n * b {
        return Err(Error::Shape {
            context: "min_flip_epsilon batch",
            expected: vec![b, n],
            actual: vec![pixels.len()],
        });
    }
    let k = model.class_count();
    let clean = model.trace(pixels, b).logits().to_vec();
    // lower-bound search for the first flipping grid index in lo..hi
    let mut lo = vec![0usize; b];
    let mut hi = vec![grid.len(); b];
    let mut misclassified = vec![false; b];
    for i in 0..b {
        if labels[i] >= k {
            return Err(Error::InvalidClass {
                index: labels[i],
                classes: k,
            });
        }
        if argmax(&clean[i * k..(i + 1) * k]) != labels[i] {
            misclassified[i] = true;
            hi[i] = 0;
        }
    }
    loop {
        let active: Vec<(usize, usize)> = (0..b)
            .filter(|&i| lo[i] < hi[i])
            .map(|i| (i, (lo[i] + hi[i]) / 2))
            .collect();
        if active.is_empty() {
            break;
        }
        let mut batch = Vec::with_capacity(active.len() * n);
        let mut objectives = Vec::with_capacity(active.len());
        let mut eps = Vec::with_capacity(active.len());
        for &(i, m) in &active {
            batch.extend_from_slice(&pixels[i * n..(i + 1) * n]);
            objectives.push(Objective::CrossEntropy { gt: labels[i] });
            eps.push(grid[m]);
        }
        let adv = attack_with_budgets(model, &batch, &objectives, &eps, search)?;
        let logits = model.trace(&adv, active.len()).logits().to_vec();
        for (j, &(i, m)) in active.iter().enumerate() {
            if argmax(&logits[j * k..(j + 1) * k]) != labels[i] {
                hi[i] = m;
            } else {
                lo[i] = m + 1;
            }
        }
    }
    let result = (0..b)
        .map(|i| {
            if misclassified[i] {
                0.0
            } else {
                grid.get(lo[i]).copied().unwrap_or(f64::INFINITY)
            }
        })
        .collect();
    Ok(result)
}

fn attack_with_budgets(
    model: &GuideModel,
    pixels: &[f32],
    objectives: &[Objective],
    eps: &[f64],
    search: &FlipSearch,
) -> Result<Vec<f32>> {
    let n = model.input_len();
    let mut adv = pixels.to_vec();
    let mut delta = vec![0f32; pixels.len()];
    for _ in 0..search.steps {
        let (grads, _, _) = model.input_gradients(&adv, objectives)?;
        for (i, &e) in eps.iter().enumerate() {
            let r = i * n..(i + 1) * n;
            let step = search.relative_step * e / search.steps as f64;
            ascent_step(
                &pixels[r.clone()],
                &mut delta[r.clone()],
                &grads[r.clone()],
                step,
                e,
                &mut adv[r],
            );
        }
    }
    Ok(adv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    /// Intercept first, then one slope per feature.
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub z: Vec<f64>,
    pub p_values: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
}

impl LogisticFit {
    /// Linear predictor `b0 + b . x`.
    pub fn linear(&self, x: &[f64]) -> f64 {
        self.coefficients[0] + self.coefficients[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.linear(x))
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub const LOGISTIC_TOL: f64 = 1e-8;
pub const LOGISTIC_MAX_ITER: usize = 100;

/// Two-sided p-value of a standard-normal statistic.
pub fn normal_two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return 1.0;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Maximum-likelihood logistic regression by iteratively reweighted least
/// squares, with an intercept prepended to each feature row.
pub fn fit_logistic(features: &[Vec<f64>], labels: &[bool]) -> Result<LogisticFit> {
    if features.len() != labels.len() {
        return Err(Error::invalid("features and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos < 2 || labels.len() - pos < 2 {
        return Err(Error::Stats(
            "logistic fit needs at least two rows of each label".into(),
        ));
    }
    let n = labels.len();
    let p = features[0].len() + 1;
    if features.iter().any(|r| r.len() + 1 != p) {
        return Err(Error::invalid("ragged feature rows"));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite feature value"));
    }
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { features[i][j - 1] });
    let y = DVector::from_iterator(n, labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
    let mut beta = DVector::zeros(p);
    let mut converged = false;
    let mut iterations = 0;
    let mut info = None;
    while iterations < LOGISTIC_MAX_ITER {
        iterations += 1;
        let eta = &x * &beta;
        let mu = eta.map(sigmoid);
        let w = mu.map(|m| m * (1.0 - m));
        let xtw = DMatrix::from_fn(p, n, |j, i| x[(i, j)] * w[i]);
        let hess = &xtw * &x;
        let grad = x.transpose() * (&y - &mu);
        let Some(chol) = hess.clone().cholesky() else {
            break;
        };
        let step = chol.solve(&grad);
        if step.iter().any(|v| !v.is_finite()) {
            break;
        }
        beta += &step;
        info = Some(hess);
        if step.amax() < LOGISTIC_TOL {
            converged = true;
            break;
        }
    }
    let eta = &x * &beta;
    let mu = eta.map(sigmoid);
    // a perfect fit means the likelihood has no finite maximiser
    if mu.iter().zip(y.iter()).all(|(m, t)| (m - t).abs() < 1e-6) {
        converged = false;
    }
    let log_likelihood = log_likelihood_at(&x, &y, &beta);
    let w = mu.map(|m| m * (1.0 - m));
    let hess = DMatrix::from_fn(p, n, |j, i| x[(i, j)] * w[i]) * &x;
    let cov = hess.try_inverse().or_else(|| info.and_then(|h| h.try_inverse()));
    let se: Vec<f64> = (0..p)
        .map(|j| cov.as_ref().map_or(f64::INFINITY, |c| c[(j, j)].max(0.0).sqrt()))
        .collect();
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let z: Vec<f64> = coefficients.iter().zip(&se).map(|(b, s)| b / s).collect();
    let p_values = z.iter().map(|&z| normal_two_sided_p(z)).collect();
    Ok(LogisticFit {
        coefficients,
        standard_errors: se,
        z,
        p_values,
        converged,
        iterations,
        log_likelihood,
    })
}

fn log_likelihood_at(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter()
        .zip(y.iter())
        .map(|(&t, &yi)| {
            // log sigmoid(t) = -softplus(-t)
            let softplus = |u: f64| {
                if u > 0.0 {
                    u + (-u).exp().ln_1p()
                } else {
                    u.exp().ln_1p()
                }
            };
            if yi > 0.5 {
                -softplus(-t)
            } else {
                -softplus(t)
            }
        })
        .sum()
}

/// Log-likelihood of `coefficients` (intercept first) on the data.
pub fn logistic_log_likelihood(features: &[Vec<f64>], labels: &[bool], coefficients: &[f64]) -> f64 {
    let n = labels.len();
    let p = coefficients.len();
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { features[i][j - 1] });
    let y = DVector::from_iterator(n, labels.iter().map(|&l| if l { 1.0 } else { 0.0 }));
    log_likelihood_at(&x, &y, &DVector::from_column_slice(coefficients))
}

/// Rank-based area under the ROC curve; a positive/negative tie counts 1/2.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Stats("AUC needs both labels present".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of mid-ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            if labels[o] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Stratified fold assignment: positives and negatives are shuffled
/// separately, then dealt round-robin.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::invalid("need at least two folds"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    let mut offset = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < k {
            return Err(Error::Stats(format!("fewer than {k} rows with label {class}")));
        }
        idx.shuffle(&mut rng);
        for (r, i) in idx.into_iter().enumerate() {
            fold[i] = (r + offset) % k;
        }
        offset += 1;
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    /// AUC of the pooled out-of-fold predictions.
    pub auc: f64,
    /// Fit on all rows.
    pub full_fit: LogisticFit,
}

/// k-fold cross-validated AUC of a logistic model on `features`.
pub fn cross_validated_auc(features: &[Vec<f64>], labels: &[bool], k: usize, seed: u64) -> Result<CvResult> {
    let folds = stratified_folds(labels, k, seed)?;
    let mut held_out = vec![0.0; labels.len()];
    for f in 0..k {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for i in 0..labels.len() {
            if folds[i] != f {
                xs.push(features[i].clone());
                ys.push(labels[i]);
            }
        }
        let fit = fit_logistic(&xs, &ys)?;
        for i in 0..labels.len() {
            if folds[i] == f {
                held_out[i] = fit.linear(&features[i]);
            }
        }
    }
    Ok(CvResult {
        auc: auc(&held_out, labels)?,
        full_fit: fit_logistic(features, labels)?,
    })
}
