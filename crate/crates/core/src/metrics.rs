//! Training loss and evaluation scores over categorical predictions.
//!
//! Bin-weighted ("BW") scores average a per-class value uniformly over the
//! classes present in the batch, so a rare class counts as much as the
//! majority class.

use std::fmt::Write as _;

use crate::binning::ClassWeights;
use crate::error::{Error, Result};
use crate::numerics::Var;

/// Probabilities below this are clamped inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

fn batch_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [n] => Ok((1, n)),
        [b, n] => Ok((b, n)),
        _ => Err(Error::Contract(format!("probabilities must be [n] or [B, n], got {shape:?}"))),
    }
}

/// Mean over the batch of `−w[label]·ln(p[label])`, differentiable through
/// `probs` (`[n]` or `[B×n]`).
pub fn weighted_cce<'t>(probs: Var<'t>, labels: &[usize], weights: &ClassWeights) -> Result<Var<'t>> {
    let (batch, n) = batch_dims(&probs.shape())?;
    if labels.len() != batch {
        return Err(Error::dim("weighted_cce", &[batch, n], &[labels.len()]));
    }
    if weights.n() != n {
        return Err(Error::dim("weighted_cce", &[n], &[weights.n()]));
    }
    let mut index = Vec::with_capacity(batch);
    let mut coeff = Vec::with_capacity(batch);
    for (b, &l) in labels.iter().enumerate() {
        if l >= n {
            return Err(Error::Contract(format!("label {l} out of range for {n} classes")));
        }
        index.push(b * n + l);
        coeff.push(-weights.weights[l] / batch as f64);
    }
    probs
        .gather(index.into(), &[batch])?
        .log_floor(PROB_FLOOR)
        .mul_const(&coeff)
        .map(|v| v.sum())
}

/// Same quantity as [`weighted_cce`] on plain rows, without a tape.
pub fn weighted_cce_value(probs: &[Vec<f64>], labels: &[usize], weights: &ClassWeights) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::dim("weighted_cce", &[probs.len()], &[labels.len()]));
    }
    let mut total = 0.0;
    for (row, &l) in probs.iter().zip(labels) {
        let p = *row
            .get(l)
            .ok_or_else(|| Error::Contract(format!("label {l} out of range for {} classes", row.len())))?;
        total += -weights.weights[l] * p.max(PROB_FLOOR).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Running prefix sum of a probability mass function.
pub fn pmf_to_cmf(pmf: &[f64]) -> Vec<f64> {
    pmf.iter()
        .scan(0.0, |acc, &p| {
            *acc += p;
            Some(*acc)
        })
        .collect()
}

/// `Σ_i (F(i) − 1[label ≤ i])²` against a point mass at `label`.
pub fn crps(cmf: &[f64], label: usize) -> f64 {
    cmf.iter()
        .enumerate()
        .map(|(i, &f)| {
            let step = if label <= i { 1.0 } else { 0.0 };
            (f - step) * (f - step)
        })
        .sum()
}

/// CRPS of a pmf placed on `centers`, evaluated at fixed `thresholds`
/// against the continuous target `y`: `Σ_j (P(Y ≤ thr_j) − 1[y ≤ thr_j])²`.
/// Lets models with different bin counts be scored on a common grid.
pub fn crps_on_grid(pmf: &[f64], centers: &[f64], y: f64, thresholds: &[f64]) -> f64 {
    thresholds
        .iter()
        .map(|&thr| {
            let f: f64 = pmf
                .iter()
                .zip(centers)
                .filter(|(_, &c)| c <= thr)
                .map(|(&p, _)| p)
                .sum();
            let step = if y <= thr { 1.0 } else { 0.0 };
            (f - step) * (f - step)
        })
        .sum()
}

/// Indices of the `k` largest entries, ties broken toward the lower index.
pub fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Model outputs for a set of samples with their true bins.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBatch {
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl PredictionBatch {
    pub fn new(probs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Data("empty prediction batch".into()));
        }
        if probs.len() != labels.len() {
            return Err(Error::dim("prediction batch", &[probs.len()], &[labels.len()]));
        }
        let n = probs[0].len();
        for (row, &l) in probs.iter().zip(&labels) {
            if row.len() != n {
                return Err(Error::dim("prediction batch", &[n], &[row.len()]));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::Contract(format!("probability row sums to {total}")));
            }
            if l >= n {
                return Err(Error::Contract(format!("label {l} out of range for {n} classes")));
            }
        }
        Ok(Self { probs, labels })
    }

    pub fn n_classes(&self) -> usize {
        self.probs[0].len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn crps_per_sample(&self) -> Vec<f64> {
        self.probs
            .iter()
            .zip(&self.labels)
            .map(|(p, &l)| crps(&pmf_to_cmf(p), l))
            .collect()
    }

    pub fn hits_top_k(&self, k: usize) -> Vec<bool> {
        self.probs
            .iter()
            .zip(&self.labels)
            .map(|(p, l)| top_k(p, k).contains(l))
            .collect()
    }

    /// Mean of `values` per present class, in ascending class order.
    fn class_means(&self, values: &[f64]) -> Vec<(usize, usize, f64)> {
        let n = self.n_classes();
        let mut sums = vec![0.0; n];
        let mut counts = vec![0usize; n];
        for (&l, &v) in self.labels.iter().zip(values) {
            sums[l] += v;
            counts[l] += 1;
        }
        (0..n)
            .filter(|&c| counts[c] > 0)
            .map(|c| (c, counts[c], sums[c] / counts[c] as f64))
            .collect()
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, count) = values.into_iter().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    sum / count as f64
}

fn as_unit(hits: &[bool]) -> Vec<f64> {
    hits.iter().map(|&h| f64::from(u8::from(h))).collect()
}

/// Plain top-k accuracy.
pub fn top_k_accuracy(batch: &PredictionBatch, k: usize) -> f64 {
    mean(as_unit(&batch.hits_top_k(k)))
}

/// Class-averaged top-k accuracy over classes present in the batch.
pub fn bw_top_k(batch: &PredictionBatch, k: usize) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty prediction batch".into()));
    }
    let per_class = batch.class_means(&as_unit(&batch.hits_top_k(k)));
    Ok(mean(per_class.into_iter().map(|(_, _, m)| m)))
}

/// Class-averaged CRPS over classes present in the batch.
pub fn bw_crps(batch: &PredictionBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty prediction batch".into()));
    }
    let per_class = batch.class_means(&batch.crps_per_sample());
    Ok(mean(per_class.into_iter().map(|(_, _, m)| m)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub bin: usize,
    pub count: usize,
    pub top3_acc: f64,
    pub mean_crps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub samples: usize,
    pub wcce: f64,
    pub top3: f64,
    pub crps_mean: f64,
    pub bw_crps: f64,
    pub bw_top3: f64,
    pub per_class: Vec<ClassMetrics>,
}

pub const REPORT_HEADER: &str = "row,bin,count,top3_acc,crps,wcce,bw_top3,bw_crps";

impl MetricReport {
    pub fn compute(batch: &PredictionBatch, weights: &ClassWeights) -> Result<Self> {
        let crps_values = batch.crps_per_sample();
        let hits = as_unit(&batch.hits_top_k(3));
        let crps_by_class = batch.class_means(&crps_values);
        let hits_by_class = batch.class_means(&hits);
        let per_class: Vec<ClassMetrics> = crps_by_class
            .iter()
            .zip(&hits_by_class)
            .map(|(&(bin, count, mean_crps), &(_, _, top3_acc))| ClassMetrics {
                bin,
                count,
                top3_acc,
                mean_crps,
            })
            .collect();
        Ok(Self {
            samples: batch.len(),
            wcce: weighted_cce_value(&batch.probs, &batch.labels, weights)?,
            top3: mean(hits.iter().copied()),
            crps_mean: mean(crps_values.iter().copied()),
            bw_crps: mean(per_class.iter().map(|c| c.mean_crps)),
            bw_top3: mean(per_class.iter().map(|c| c.top3_acc)),
            per_class,
        })
    }

    /// One row per present class, then a summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for c in &self.per_class {
            let _ = writeln!(out, "class,{},{},{},{},,,", c.bin, c.count, c.top3_acc, c.mean_crps);
        }
        let _ = writeln!(
            out,
            "summary,,{},{},{},{},{},{}",
            self.samples, self.top3, self.crps_mean, self.wcce, self.bw_top3, self.bw_crps
        );
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Format {
            offset: 0,
            message: format!("malformed report line {line:?}"),
        };
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(bad("header"));
        }
        let mut per_class = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(line));
            match f[0] {
                "class" => per_class.push(ClassMetrics {
                    bin: int(f[1])?,
                    count: int(f[2])?,
                    top3_acc: num(f[3])?,
                    mean_crps: num(f[4])?,
                }),
                "summary" => {
                    return Ok(Self {
                        samples: int(f[2])?,
                        top3: num(f[3])?,
                        crps_mean: num(f[4])?,
                        wcce: num(f[5])?,
                        bw_top3: num(f[6])?,
                        bw_crps: num(f[7])?,
                        per_class,
                    })
                }
                _ => return Err(bad(line)),
            }
        }
        Err(bad("missing summary"))
    }
}
