//! Outcome statistics: chi-square tests, bootstrap intervals, the binomial
//! dropout tail, learning curves, and per-variant summaries.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::factorial::ln_binomial;

use crate::curriculum::Variant;
use crate::error::{Error, Result};

pub const DEFAULT_REPLICATES: usize = 10_000;
/// Learning-curve smoothing window: the odd width closest to one 16-trial
/// block from below.
pub const DEFAULT_WINDOW: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub p: f64,
}

/// Pearson chi-square (no continuity correction) for `[[a, b], [c, d]]`.
pub fn chisq_2x2(a: u64, b: u64, c: u64, d: u64) -> Result<ChiSquare> {
    let rows = [a + b, c + d];
    let cols = [a + c, b + d];
    if rows.contains(&0) || cols.contains(&0) {
        return Err(Error::Stats("chi-square table has an empty row or column".into()));
    }
    let n = (a + b + c + d) as f64;
    let det = a as f64 * d as f64 - b as f64 * c as f64;
    let statistic = n * det * det / (rows[0] as f64 * rows[1] as f64 * cols[0] as f64 * cols[1] as f64);
    let p = ChiSquared::new(1.0)
        .map_err(|e| Error::Stats(e.to_string()))?
        .sf(statistic)
        .clamp(0.0, 1.0);
    Ok(ChiSquare { statistic, p })
}

/// Linear-interpolation (type 7) quantile of sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

fn percentile_interval(mut reps: Vec<f64>, estimate: f64, level: f64) -> Interval {
    reps.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Interval {
        estimate,
        // widened to the point estimate if the percentile band misses it
        lo: quantile_sorted(&reps, tail).min(estimate),
        hi: quantile_sorted(&reps, 1.0 - tail).max(estimate),
    }
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Stats(format!("confidence level must be in (0, 1), got {level}")));
    }
    Ok(())
}

/// Percentile bootstrap interval of `statistic` over `replicates` seeded
/// resamples.
pub fn bootstrap_ci(
    samples: &[f64],
    statistic: impl Fn(&[f64]) -> f64,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<Interval> {
    if samples.len() < 2 {
        return Err(Error::Stats("bootstrap needs at least two samples".into()));
    }
    check_level(level)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; samples.len()];
    let reps: Vec<f64> = (0..replicates.max(1))
        .map(|_| {
            for b in buf.iter_mut() {
                *b = samples[rng.random_range(0..samples.len())];
            }
            statistic(&buf)
        })
        .collect();
    Ok(percentile_interval(reps, statistic(samples), level))
}

/// Bootstrap interval for `mean(a) - mean(b)`, resampling each group
/// independently.
pub fn bootstrap_mean_difference(a: &[f64], b: &[f64], replicates: usize, level: f64, seed: u64) -> Result<Interval> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Stats("bootstrap needs at least two samples per group".into()));
    }
    check_level(level)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |v: &[f64], rng: &mut ChaCha8Rng| {
        (0..v.len()).map(|_| v[rng.random_range(0..v.len())]).sum::<f64>() / v.len() as f64
    };
    let reps: Vec<f64> = (0..replicates.max(1))
        .map(|_| draw(a, &mut rng) - draw(b, &mut rng))
        .collect();
    Ok(percentile_interval(reps, mean(a) - mean(b), level))
}

fn ln_pmf(n: u64, k: u64, ln_p: f64, ln_q: f64) -> f64 {
    let term = |count: u64, l: f64| if count == 0 { 0.0 } else { count as f64 * l };
    ln_binomial(n, k) + term(k, ln_p) + term(n - k, ln_q)
}

/// `P(X >= d)` for `X ~ Binomial(n, p)`, summed in log space.
pub fn binom_tail_geq(n: u64, d: u64, p: f64) -> Result<f64> {
    if d > n {
        return Err(Error::Stats(format!("tail threshold {d} exceeds n = {n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Stats(format!("probability {p} outside [0, 1]")));
    }
    if d == 0 {
        return Ok(1.0);
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(1.0);
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let logs: Vec<f64> = (d..=n).map(|k| ln_pmf(n, k, lp, lq)).collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln())
        .exp()
        .min(1.0))
}

/// `P(X = k)`.
pub fn binom_pmf(n: u64, k: u64, p: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    if p == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p == 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    ln_pmf(n, k, p.ln(), (-p).ln_1p()).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub mean: Vec<f64>,
    pub sem: Vec<f64>,
}

/// Centred moving average (truncated at the ends) of each sequence, then the
/// mean and standard error across sequences at every trial.
pub fn learning_curve(sequences: &[Vec<f64>], window: usize) -> Result<Curve> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Stats(format!(
            "smoothing window must be odd and >= 1, got {window}"
        )));
    }
    let Some(first) = sequences.first() else {
        return Err(Error::Stats("no sequences".into()));
    };
    let t = first.len();
    if sequences.iter().any(|s| s.len() != t) {
        return Err(Error::Stats("sequences differ in length".into()));
    }
    let h = window / 2;
    let smoothed: Vec<Vec<f64>> = sequences
        .iter()
        .map(|s| {
            (0..t)
                .map(|i| {
                    let lo = i.saturating_sub(h);
                    let hi = (i + h).min(t - 1);
                    s[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
                })
                .collect()
        })
        .collect();
    let n = smoothed.len() as f64;
    let mut out = Curve {
        mean: Vec::with_capacity(t),
        sem: Vec::with_capacity(t),
    };
    for i in 0..t {
        let m = smoothed.iter().map(|s| s[i]).sum::<f64>() / n;
        let sem = if smoothed.len() > 1 {
            let var = smoothed.iter().map(|s| (s[i] - m).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        out.mean.push(m);
        out.sem.push(sem);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantOutcome {
    pub participant_id: String,
    pub variant: Variant,
    pub test_accuracy: f64,
    pub training_minutes: f64,
    /// `confusion[true][chosen]` over test trials, in task-class order.
    pub confusion: Vec<Vec<u32>>,
    /// Test trials without a response.
    pub test_timeouts: u32,
    /// Main training-trial correctness, in presentation order.
    pub train_sequence: Vec<bool>,
    pub test_sequence: Vec<bool>,
}

impl ParticipantOutcome {
    pub fn check(&self) -> Result<()> {
        let total: u32 = self.confusion.iter().flatten().sum::<u32>() + self.test_timeouts;
        if total as usize != self.test_sequence.len() {
            return Err(Error::Stats(format!(
                "confusion counts {total} do not match {} test trials",
                self.test_sequence.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTable {
    /// Dataset class ids behind the confusion rows/columns.
    pub task_classes: Vec<usize>,
    pub rows: Vec<ParticipantOutcome>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    participant_id: String,
    variant: Variant,
    test_accuracy: f64,
    training_minutes: f64,
    confusion: String,
    test_timeouts: u32,
    train_sequence: String,
    test_sequence: String,
}

fn bits(v: &[bool]) -> String {
    v.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

fn unbits(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(Error::Stats(format!("bad sequence character {other:?}"))),
        })
        .collect()
}

impl OutcomeTable {
    pub fn variant_rows(&self, v: Variant) -> impl Iterator<Item = &ParticipantOutcome> {
        self.rows.iter().filter(move |r| r.variant == v)
    }

    pub fn accuracies(&self, v: Variant) -> Vec<f64> {
        self.variant_rows(v).map(|r| r.test_accuracy).collect()
    }

    /// One row per participant; confusion rows joined by `|`, cells by `;`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(CsvRow {
                participant_id: r.participant_id.clone(),
                variant: r.variant,
                test_accuracy: r.test_accuracy,
                training_minutes: r.training_minutes,
                confusion: r
                    .confusion
                    .iter()
                    .map(|row| row.iter().map(u32::to_string).collect::<Vec<_>>().join(";"))
                    .collect::<Vec<_>>()
                    .join("|"),
                test_timeouts: r.test_timeouts,
                train_sequence: bits(&r.train_sequence),
                test_sequence: bits(&r.test_sequence),
            })?;
        }
        wr.flush().map_err(Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, task_classes: Vec<usize>) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        for row in rd.deserialize() {
            let c: CsvRow = row?;
            let confusion = c
                .confusion
                .split('|')
                .map(|row| {
                    row.split(';')
                        .map(|x| x.parse::<u32>().map_err(|e| Error::Stats(e.to_string())))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(ParticipantOutcome {
                participant_id: c.participant_id,
                variant: c.variant,
                test_accuracy: c.test_accuracy,
                training_minutes: c.training_minutes,
                confusion,
                test_timeouts: c.test_timeouts,
                train_sequence: unbits(&c.train_sequence)?,
                test_sequence: unbits(&c.test_sequence)?,
            });
        }
        Ok(OutcomeTable { task_classes, rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    /// Absent when the class was never chosen.
    pub precision: Option<Interval>,
    /// Absent when the class never appeared.
    pub recall: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub participants: usize,
    pub mean_accuracy: Interval,
    pub margin: f64,
    /// `(margin - control margin) / control margin`; absent when the control
    /// margin is not positive.
    pub relative_margin_gain: Option<f64>,
    pub mean_training_minutes: f64,
    pub per_class: Vec<ClassStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub chance: f64,
    pub variants: BTreeMap<Variant, VariantSummary>,
}

fn pooled(rows: &[&ParticipantOutcome], k: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; k]; k];
    for r in rows {
        for (i, row) in r.confusion.iter().enumerate().take(k) {
            for (j, &v) in row.iter().enumerate().take(k) {
                m[i][j] += v as u64;
            }
        }
    }
    m
}

fn precision_recall(m: &[Vec<u64>], c: usize) -> (Option<f64>, Option<f64>) {
    let chosen: u64 = m.iter().map(|r| r[c]).sum();
    let actual: u64 = m[c].iter().sum();
    let tp = m[c][c] as f64;
    (
        (chosen > 0).then(|| tp / chosen as f64),
        (actual > 0).then(|| tp / actual as f64),
    )
}

/// Per-variant accuracy, margin above `chance`, gain relative to CONTROL,
/// and pooled per-class precision/recall with participant-bootstrap
/// intervals.
pub fn summarize(table: &OutcomeTable, chance: f64, replicates: usize, seed: u64) -> Result<Summary> {
    let k = table.task_classes.len();
    let mut by_variant: BTreeMap<Variant, Vec<&ParticipantOutcome>> = BTreeMap::new();
    for r in &table.rows {
        r.check()?;
        by_variant.entry(r.variant).or_default().push(r);
    }
    for rows in by_variant.values_mut() {
        rows.sort_by(|a, b| a.participant_id.cmp(&b.participant_id));
    }
    let Some(control) = by_variant.get(&Variant::Control) else {
        return Err(Error::Stats("summary needs a CONTROL group".into()));
    };
    let control_margin = mean(&control.iter().map(|r| r.test_accuracy).collect::<Vec<_>>()) - chance;

    let mut variants = BTreeMap::new();
    for (v, rows) in &by_variant {
        let acc: Vec<f64> = rows.iter().map(|r| r.test_accuracy).collect();
        let mean_accuracy = if acc.len() >= 2 {
            bootstrap_ci(&acc, mean, replicates, 0.95, seed)?
        } else {
            Interval {
                estimate: acc[0],
                lo: acc[0],
                hi: acc[0],
            }
        };
        let margin = mean_accuracy.estimate - chance;
        let relative_margin_gain = (control_margin > 0.0).then(|| (margin - control_margin) / control_margin);

        let point = pooled(rows, k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let mut reps: Vec<Vec<(Option<f64>, Option<f64>)>> = Vec::with_capacity(replicates);
        if rows.len() >= 2 {
            for _ in 0..replicates {
                let sample: Vec<&ParticipantOutcome> =
                    (0..rows.len()).map(|_| rows[rng.random_range(0..rows.len())]).collect();
                let m = pooled(&sample, k);
                reps.push((0..k).map(|c| precision_recall(&m, c)).collect());
            }
        }
        let per_class = (0..k)
            .map(|c| {
                let (p, r) = precision_recall(&point, c);
                let band = |est: Option<f64>, pick: fn(&(Option<f64>, Option<f64>)) -> Option<f64>| {
                    est.map(|e| {
                        let vals: Vec<f64> = reps.iter().filter_map(|rep| pick(&rep[c])).collect();
                        if vals.is_empty() {
                            Interval {
                                estimate: e,
                                lo: e,
                                hi: e,
                            }
                        } else {
                            percentile_interval(vals, e, 0.95)
                        }
                    })
                };
                ClassStats {
                    class: table.task_classes[c],
                    precision: band(p, |x| x.0),
                    recall: band(r, |x| x.1),
                }
            })
            .collect();
        variants.insert(
            *v,
            VariantSummary {
                participants: rows.len(),
                mean_accuracy,
                margin,
                relative_margin_gain,
                mean_training_minutes: mean(&rows.iter().map(|r| r.training_minutes).collect::<Vec<_>>()),
                per_class,
            },
        );
    }
    Ok(Summary { chance, variants })
}

/// Trial-level 2x2 of pooled correct / incorrect test responses, `a` vs `b`.
pub fn pooled_trial_chisq(table: &OutcomeTable, a: Variant, b: Variant) -> Result<ChiSquare> {
    let count = |v| {
        table.variant_rows(v).fold((0u64, 0u64), |(c, w), r| {
            let ok = r.test_sequence.iter().filter(|&&x| x).count() as u64;
            (c + ok, w + r.test_sequence.len() as u64 - ok)
        })
    };
    let (ac, aw) = count(a);
    let (bc, bw) = count(b);
    chisq_2x2(ac, aw, bc, bw)
}

/// Participant-level alternative: participants above vs at-or-below the
/// pooled median test accuracy, `a` vs `b`.
pub fn participant_median_chisq(table: &OutcomeTable, a: Variant, b: Variant) -> Result<ChiSquare> {
    let mut all: Vec<f64> = table
        .rows
        .iter()
        .filter(|r| r.variant == a || r.variant == b)
        .map(|r| r.test_accuracy)
        .collect();
    if all.is_empty() {
        return Err(Error::Stats("no participants in either group".into()));
    }
    all.sort_by(f64::total_cmp);
    let med = quantile_sorted(&all, 0.5);
    let split = |v| {
        table.variant_rows(v).fold((0u64, 0u64), |(hi, lo), r| {
            if r.test_accuracy > med {
                (hi + 1, lo)
            } else {
                (hi, lo + 1)
            }
        })
    };
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    chisq_2x2(ah, al, bh, bl)
}
