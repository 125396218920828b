//! Regression targets, their categorical encoding, input scaling and the
//! class-frequency loss weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Accumulated rainfall (mm) over a `[T′×H′×W′]` field of 15-minute rain
/// rates (mm/h): the field mean times four.
pub fn derive_target(rain: &Tensor) -> Result<f64> {
    if rain.ndim() != 3 {
        return Err(Error::Contract(format!(
            "rain field must be [frames, height, width], got {:?}",
            rain.shape()
        )));
    }
    let mut total = 0.0;
    for (i, &v) in rain.data().iter().enumerate() {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Data(format!("invalid rain rate {v} at flat index {i}")));
        }
        total += v;
    }
    Ok(4.0 * total / rain.numel() as f64)
}

/// Uniform partition of `[y_min, y_max]` into `n` bins whose centers are
/// `y_min + i·δ`, `δ = (y_max − y_min)/(n − 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub y_min: f64,
    pub y_max: f64,
    pub n: usize,
}

impl BinSpec {
    pub fn new(y_min: f64, y_max: f64, n: usize) -> Result<Self> {
        if !(y_min.is_finite() && y_max.is_finite() && y_max > y_min) {
            return Err(Error::Config(format!("bin range [{y_min}, {y_max}] is empty")));
        }
        if n < 2 {
            return Err(Error::Config(format!("need at least 2 bins, got {n}")));
        }
        Ok(Self { y_min, y_max, n })
    }

    /// Range taken from the targets. When every target is equal the upper
    /// end is placed one unit above so that all of them land in bin 0.
    pub fn from_targets(targets: &[f64], n: usize) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Data("no targets to derive bins from".into()));
        }
        let lo = targets.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let hi = if hi > lo { hi } else { lo + 1.0 };
        Self::new(lo, hi, n)
    }

    pub fn delta(&self) -> f64 {
        (self.y_max - self.y_min) / (self.n - 1) as f64
    }

    /// Nearest bin; ties round away from zero, out-of-range targets clamp.
    pub fn to_bin(&self, y: f64) -> usize {
        let i = ((y - self.y_min) / self.delta()).round();
        i.clamp(0.0, (self.n - 1) as f64) as usize
    }

    pub fn bin_center(&self, i: usize) -> Result<f64> {
        if i >= self.n {
            return Err(Error::Contract(format!("bin {i} out of range for {} bins", self.n)));
        }
        if i == self.n - 1 {
            return Ok(self.y_max);
        }
        Ok(self.y_min + i as f64 * self.delta())
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.bin_center(i).unwrap()).collect()
    }
}

pub fn one_hot(i: usize, n: usize) -> Result<Tensor> {
    if i >= n {
        return Err(Error::Contract(format!("class {i} out of range for {n} classes")));
    }
    let mut t = Tensor::zeros(&[n]);
    t.data_mut()[i] = 1.0;
    Ok(t)
}

/// Per-channel min/max of training inputs (`[T×C×H×W]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
}

impl NormStats {
    pub fn compute<'a>(inputs: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut stats: Option<NormStats> = None;
        for x in inputs {
            let [_, channels, h, w] = *x.shape() else {
                return Err(Error::Contract(format!("input must be 4-D, got {:?}", x.shape())));
            };
            let s = stats.get_or_insert_with(|| NormStats {
                x_min: vec![f64::INFINITY; channels],
                x_max: vec![f64::NEG_INFINITY; channels],
            });
            if s.x_min.len() != channels {
                return Err(Error::dim("compute_stats", &[s.x_min.len()], &[channels]));
            }
            for (k, plane) in x.data().chunks_exact(h * w).enumerate() {
                let c = k % channels;
                for &v in plane {
                    s.x_min[c] = s.x_min[c].min(v);
                    s.x_max[c] = s.x_max[c].max(v);
                }
            }
        }
        let stats = stats.ok_or_else(|| Error::Data("cannot compute statistics of an empty split".into()))?;
        for (c, (lo, hi)) in stats.x_min.iter().zip(&stats.x_max).enumerate() {
            if lo == hi {
                log::warn!("channel {c} is constant ({lo}); it normalizes to 0");
            }
        }
        Ok(stats)
    }

    pub fn channels(&self) -> usize {
        self.x_min.len()
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let [_, channels, h, w] = *x.shape() else {
            return Err(Error::Contract(format!("input must be 4-D, got {:?}", x.shape())));
        };
        if channels != self.channels() {
            return Err(Error::dim("normalize", x.shape(), &[self.channels()]));
        }
        let mut out = x.clone();
        for (k, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
            let c = k % channels;
            let (lo, hi) = (self.x_min[c], self.x_max[c]);
            for v in plane {
                *v = f(*v, lo, hi);
            }
        }
        Ok(out)
    }

    /// `(x − x_min)/(x_max − x_min)` per channel; constant channels map to 0.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, lo, hi| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
    }

    /// Inverse of [`normalize`](Self::normalize) on non-constant channels.
    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, lo, hi| lo + v * (hi - lo))
    }
}

/// Loss weights `w_i = −ln(|D_i| / |D|)` from the training label histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub histogram: Vec<usize>,
    pub total: usize,
}

impl ClassWeights {
    /// Empty bins get the largest weight among occupied bins.
    pub fn from_labels(labels: &[usize], n: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("no labels to weight".into()));
        }
        let mut histogram = vec![0usize; n];
        for &l in labels {
            *histogram
                .get_mut(l)
                .ok_or_else(|| Error::Contract(format!("label {l} out of range for {n} bins")))? += 1;
        }
        let total = labels.len();
        let mut weights: Vec<f64> = histogram
            .iter()
            .map(|&c| if c > 0 { 0.0 - (c as f64 / total as f64).ln() } else { f64::NAN })
            .collect();
        let max_occupied = weights.iter().copied().filter(|w| !w.is_nan()).fold(0.0, f64::max);
        for w in &mut weights {
            if w.is_nan() {
                *w = max_occupied;
            }
        }
        Ok(Self {
            weights,
            histogram,
            total,
        })
    }

    /// All-ones weights: plain cross-entropy.
    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
            histogram: vec![0; n],
            total: 0,
        }
    }

    /// The same weights rescaled to mean 1 (left alone if they are all zero).
    pub fn mean_normalized(&self) -> Self {
        let mean = self.weights.iter().sum::<f64>() / self.weights.len() as f64;
        let mut out = self.clone();
        if mean > 0.0 {
            out.weights.iter_mut().for_each(|w| *w /= mean);
        }
        out
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }
}
