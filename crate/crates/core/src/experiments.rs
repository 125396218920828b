//! Ablation drivers shared by the command line and the acceptance suite.
//! Variants always run, and are reported, in a fixed order.

use std::fmt::Write as _;
use std::path::Path;

use crate::binning::BinSpec;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::crps_on_grid;
use crate::model::{AttentionMode, ModelConfig};
use crate::synthdata::{Dataset, GeneratorConfig, SampleRecord, SyntheticWorld};
use crate::training::{predict_records, train, TrainConfig};

/// Points at which models with different bin counts are compared.
pub const GRID_POINTS: usize = 64;

/// A seeded imbalanced dataset plus the model and schedule trained on it.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Benchmark {
    /// Sized for a single CPU core: 16×16 crops of 11 channels over 4
    /// frames, 8×8 patches, width 32, two blocks, 16 bins, 600 steps.
    pub fn reference() -> Self {
        let generator = GeneratorConfig {
            region_size: 64,
            crop: 16,
            blob_rate: 6.0,
            train_samples: 4096,
            val_samples: 2048,
            n_bins: 16,
            seed: 1,
            ..GeneratorConfig::default()
        };
        let model = ModelConfig {
            frames: generator.input_frames,
            channels: generator.channels,
            height: generator.crop,
            width: generator.crop,
            patch: 8,
            dim: 32,
            heads: 2,
            depth: 2,
            n_bins: generator.n_bins,
            ..ModelConfig::full_size()
        };
        let train = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 16,
            max_steps: 600,
            val_interval: 100,
            ..TrainConfig::default()
        };
        Self { generator, model, train }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::build(&SyntheticWorld::generate(&self.generator)?)
    }
}

/// Scores of one trained variant, taken from its best checkpoint on the
/// validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub variant: String,
    pub seed: u64,
    pub bw_top3: f64,
    pub bw_crps: f64,
    /// Mean CRPS on the common threshold grid against the continuous target.
    pub grid_crps: f64,
    /// Mean CRPS over the variant's own bins.
    pub native_crps: f64,
    pub best_step: usize,
    pub step_seconds: f64,
}

/// Common thresholds: the centers of `GRID_POINTS` bins over the training
/// target range.
pub fn threshold_grid(dataset: &Dataset) -> Result<Vec<f64>> {
    let targets: Vec<f64> = dataset.train.iter().map(|r| r.y_reg).collect();
    Ok(BinSpec::from_targets(&targets, GRID_POINTS)?.centers())
}

/// Mean grid CRPS of a checkpoint over `records`.
pub fn grid_crps(checkpoint: &Checkpoint, records: &[SampleRecord], thresholds: &[f64]) -> Result<f64> {
    let inputs = records
        .iter()
        .map(|r| checkpoint.meta.norm.normalize(&r.x_raw))
        .collect::<Result<Vec<_>>>()?;
    let probs = predict_records(&checkpoint.params, &checkpoint.meta.model, &inputs)?;
    let centers = checkpoint.meta.bins.centers();
    let total: f64 = probs
        .iter()
        .zip(records)
        .map(|(p, r)| crps_on_grid(p, &centers, r.y_reg, thresholds))
        .sum();
    Ok(total / records.len() as f64)
}

/// Trains one variant and scores its best checkpoint.
pub fn run_variant(
    variant: &str,
    model: &ModelConfig,
    train_config: &TrainConfig,
    dataset: &Dataset,
    thresholds: &[f64],
    run_dir: Option<&Path>,
) -> Result<VariantResult> {
    log::info!("training {variant} (seed {})", train_config.seed);
    let outcome = train(train_config, model, dataset, run_dir)?;
    let best = outcome
        .log
        .best()
        .ok_or_else(|| Error::Config("an ablation run needs at least one training step".into()))?;
    Ok(VariantResult {
        variant: variant.to_string(),
        seed: train_config.seed,
        bw_top3: best.report.bw_top3,
        bw_crps: best.report.bw_crps,
        grid_crps: grid_crps(&outcome.best, &dataset.validation, thresholds)?,
        native_crps: best.report.crps_mean,
        best_step: best.step,
        step_seconds: outcome.mean_step_seconds,
    })
}

fn sub_dir(out: Option<&Path>, variant: &str, seed: u64) -> Option<std::path::PathBuf> {
    out.map(|o| o.join(format!("{variant}_seed{seed}")))
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    Ok(())
}

/// Weighted and plain cross-entropy per seed, weighted first.
pub fn ablate_loss(
    model: &ModelConfig,
    train_config: &TrainConfig,
    dataset: &Dataset,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<VariantResult>> {
    check_seeds(seeds)?;
    let grid = threshold_grid(dataset)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for (variant, weighting) in [("weighted", true), ("unweighted", false)] {
            let tc = TrainConfig {
                seed,
                loss_weighting: weighting,
                ..train_config.clone()
            };
            let dir = sub_dir(out, variant, seed);
            rows.push(run_variant(variant, model, &tc, dataset, &grid, dir.as_deref())?);
        }
    }
    Ok(rows)
}

/// Full, spatial-then-temporal and temporal-then-spatial attention per seed.
pub fn ablate_attention(
    model: &ModelConfig,
    train_config: &TrainConfig,
    dataset: &Dataset,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<VariantResult>> {
    check_seeds(seeds)?;
    let grid = threshold_grid(dataset)?;
    let mut rows = Vec::new();
    for &seed in seeds {
        for mode in AttentionMode::ALL {
            let mc = ModelConfig {
                attention: mode,
                ..model.clone()
            };
            let tc = TrainConfig {
                seed,
                loss_weighting: true,
                ..train_config.clone()
            };
            let dir = sub_dir(out, mode.label(), seed);
            rows.push(run_variant(mode.label(), &mc, &tc, dataset, &grid, dir.as_deref())?);
        }
    }
    Ok(rows)
}

/// One model per bin count and seed.
pub fn ablate_bins(
    model: &ModelConfig,
    train_config: &TrainConfig,
    dataset: &Dataset,
    bin_counts: &[usize],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<VariantResult>> {
    check_seeds(seeds)?;
    if bin_counts.is_empty() {
        return Err(Error::Config("at least one bin count is required".into()));
    }
    let grid = threshold_grid(dataset)?;
    let mut rows = Vec::new();
    for &n in bin_counts {
        let mut data = dataset.clone();
        data.relabel(n)?;
        let mc = ModelConfig {
            n_bins: n,
            ..model.clone()
        };
        for &seed in seeds {
            let tc = TrainConfig {
                seed,
                ..train_config.clone()
            };
            let dir = sub_dir(out, &format!("bins{n}"), seed);
            rows.push(run_variant(&n.to_string(), &mc, &tc, &data, &grid, dir.as_deref())?);
        }
    }
    Ok(rows)
}

/// Means per variant, in first-appearance order.
pub fn variant_means(rows: &[VariantResult]) -> Vec<VariantResult> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let group: Vec<&VariantResult> = rows.iter().filter(|r| r.variant == v).collect();
            let mean = |f: fn(&VariantResult) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / group.len() as f64;
            VariantResult {
                variant: v.to_string(),
                seed: 0,
                bw_top3: mean(|r| r.bw_top3),
                bw_crps: mean(|r| r.bw_crps),
                grid_crps: mean(|r| r.grid_crps),
                native_crps: mean(|r| r.native_crps),
                best_step: 0,
                step_seconds: mean(|r| r.step_seconds),
            }
        })
        .collect()
}

pub const LOSS_TABLE_HEADER: &str = "weighting,seed,bw_top3,bw_crps";
pub const ATTENTION_TABLE_HEADER: &str = "mode,seed,bw_top3,bw_crps,step_seconds";
pub const BINS_TABLE_HEADER: &str = "n_bins,crps,native_crps,bw_top3,bw_crps";

/// Per-seed rows, then one `mean` row per variant.
pub fn loss_table(rows: &[VariantResult]) -> String {
    let mut out = format!("{LOSS_TABLE_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.variant, r.seed, r.bw_top3, r.bw_crps);
    }
    for m in variant_means(rows) {
        let _ = writeln!(out, "{},mean,{},{}", m.variant, m.bw_top3, m.bw_crps);
    }
    out
}

pub fn attention_table(rows: &[VariantResult]) -> String {
    let mut out = format!("{ATTENTION_TABLE_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.variant, r.seed, r.bw_top3, r.bw_crps, r.step_seconds);
    }
    for m in variant_means(rows) {
        let _ = writeln!(out, "{},mean,{},{},{}", m.variant, m.bw_top3, m.bw_crps, m.step_seconds);
    }
    out
}

/// One row per bin count, averaged over seeds. `crps` is on the common grid.
pub fn bins_table(rows: &[VariantResult]) -> String {
    let mut out = format!("{BINS_TABLE_HEADER}\n");
    for m in variant_means(rows) {
        let _ = writeln!(out, "{},{},{},{},{}", m.variant, m.grid_crps, m.native_crps, m.bw_top3, m.bw_crps);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: &str, seed: u64, v: f64) -> VariantResult {
        VariantResult {
            variant: variant.into(),
            seed,
            bw_top3: v,
            bw_crps: 2.0 * v,
            grid_crps: v,
            native_crps: v,
            best_step: 1,
            step_seconds: 0.5,
        }
    }

    #[test]
    fn tables_have_fixed_shape() {
        let rows = vec![row("weighted", 1, 1.0), row("unweighted", 1, 0.0), row("weighted", 2, 0.5), row("unweighted", 2, 0.25)];
        let t = loss_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], LOSS_TABLE_HEADER);
        assert_eq!(lines.len(), 1 + 2 * 2 + 2);
        assert_eq!(lines[5], "weighted,mean,0.75,1.5");
        assert_eq!(lines[6], "unweighted,mean,0.125,0.25");
        assert_eq!(bins_table(&[row("4", 1, 3.0), row("4", 2, 1.0), row("8", 1, 1.0)]).lines().count(), 3);
    }
}
