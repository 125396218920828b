//! Adam, the training loop and evaluation of saved checkpoints.
//!
//! Each sample of a batch gets its own tape; samples may run on a worker
//! pool (size from `SATFORMER_THREADS`), but their gradients are summed in
//! batch order on the calling thread, so results do not depend on the
//! thread count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binning::{BinSpec, ClassWeights, NormStats};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::metrics::{weighted_cce, MetricReport, PredictionBatch};
use crate::model::{self, ModelConfig, Params};
use crate::numerics::{Tape, Tensor};
use crate::synthdata::{Dataset, SampleRecord};

pub const THREADS_ENV: &str = "SATFORMER_THREADS";

/// Optimizer and schedule settings. Attention mode and bin count belong to
/// [`ModelConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Validate (and maybe checkpoint) every this many steps and after the last.
    pub val_interval: usize,
    pub seed: u64,
    pub loss_weighting: bool,
    /// Rescale class weights to mean 1 so the weighted and plain losses
    /// have comparable magnitude.
    pub normalize_weights: bool,
    /// Global gradient-norm clip. Off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            max_steps: 500,
            val_interval: 50,
            seed: 0,
            loss_weighting: true,
            normalize_weights: false,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// Learning rate 1e-5, batch 128, 25 000 steps.
    pub fn full_size() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 128,
            max_steps: 25_000,
            val_interval: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.val_interval == 0 {
            return Err(Error::Config("val_interval must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Adam moments, one array per parameter tensor in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.slots().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut Params, grads: &[Vec<f64>], state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    let mut slots = params.slots_mut();
    if grads.len() != slots.len() || state.m.len() != slots.len() || state.v.len() != slots.len() {
        return Err(Error::dim("adam_step", &[slots.len()], &[grads.len(), state.m.len()]));
    }
    for (i, t) in slots.iter().enumerate() {
        let n = t.numel();
        if grads[i].len() != n || state.m[i].len() != n || state.v[i].len() != n {
            return Err(Error::dim("adam_step", t.shape(), &[grads[i].len()]));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, tensor) in slots.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradient(
    params: &Params,
    config: &ModelConfig,
    x: &Tensor,
    label: usize,
    weights: &ClassWeights,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let tape = Tape::unchecked();
    let vars = params.register(&tape);
    let input = tape.leaf(x);
    let probs = model::forward(input, &vars, config)?;
    let loss = weighted_cce(probs, &[label], weights)?;
    let value = loss.item()?;
    tape.backward(loss)?;
    Ok((value, Params::collect_grads(&vars)))
}

/// Mean loss and summed-then-averaged gradients over a batch, reduced in
/// batch order.
pub fn batch_gradient(
    params: &Params,
    config: &ModelConfig,
    batch: &[(&Tensor, usize)],
    weights: &ClassWeights,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let per_sample: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch
        .par_iter()
        .map(|&(x, label)| sample_gradient(params, config, x, label, weights))
        .collect();
    let mut loss = 0.0;
    let mut total: Vec<Vec<f64>> = params.slots().iter().map(|t| vec![0.0; t.numel()]).collect();
    for r in per_sample {
        let (l, grads) = r?;
        loss += l;
        for (acc, g) in total.iter_mut().zip(grads) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    total.iter_mut().flatten().for_each(|g| *g *= scale);
    Ok((loss * scale, total))
}

fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Class probabilities for every record, in order.
pub fn predict_records(params: &Params, config: &ModelConfig, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    inputs
        .par_iter()
        .map(|x| model::predict(params, config, x).map(Tensor::into_data))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Validation {
    pub step: usize,
    pub loss: f64,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    /// `(step, mean batch loss)`, steps counted from 1.
    pub train_loss: Vec<(usize, f64)>,
    pub validations: Vec<Validation>,
    /// Step of the lowest validation loss, if any validation ran.
    pub best_step: Option<usize>,
}

pub const TRAIN_LOG: &str = "train_log.csv";
pub const VAL_LOG: &str = "val_log.csv";
pub const REPORT_DIR: &str = "reports";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_LINK: &str = "best";
pub const CONFIG_FILE: &str = "config.json";

fn report_name(step: usize) -> String {
    format!("step_{step:06}.csv")
}

fn checkpoint_name(step: usize) -> String {
    format!("step_{step:06}")
}

impl RunLog {
    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty() && self.validations.is_empty()
    }

    pub fn best(&self) -> Option<&Validation> {
        let step = self.best_step?;
        self.validations.iter().find(|v| v.step == step)
    }

    pub fn train_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.train_loss {
            let _ = writeln!(out, "{s},{l:?}");
        }
        out
    }

    pub fn val_csv(&self) -> String {
        let mut out = String::from("step,val_loss\n");
        for v in &self.validations {
            let _ = writeln!(out, "{},{:?}", v.step, v.loss);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(TRAIN_LOG), self.train_csv())?;
        std::fs::write(dir.join(VAL_LOG), self.val_csv())?;
        let reports = dir.join(REPORT_DIR);
        std::fs::create_dir_all(&reports)?;
        for v in &self.validations {
            std::fs::write(reports.join(report_name(v.step)), v.report.to_csv())?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        fn pairs(path: &Path, header: &str) -> Result<Vec<(usize, f64)>> {
            let text = std::fs::read_to_string(path)?;
            let mut lines = text.lines();
            if lines.next() != Some(header) {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("{} must start with {header:?}", path.display()),
                });
            }
            lines
                .enumerate()
                .map(|(i, line)| {
                    let parsed = line
                        .split_once(',')
                        .and_then(|(s, l)| Some((s.parse().ok()?, l.parse().ok()?)));
                    parsed.ok_or_else(|| Error::Format {
                        offset: i as u64 + 1,
                        message: format!("{}: malformed row {line:?}", path.display()),
                    })
                })
                .collect()
        }
        let train_loss = pairs(&dir.join(TRAIN_LOG), "step,loss")?;
        let mut validations = Vec::new();
        for (step, loss) in pairs(&dir.join(VAL_LOG), "step,val_loss")? {
            let text = std::fs::read_to_string(dir.join(REPORT_DIR).join(report_name(step)))?;
            validations.push(Validation {
                step,
                loss,
                report: MetricReport::from_csv(&text)?,
            });
        }
        let best_step = best_of(&validations);
        Ok(Self {
            train_loss,
            validations,
            best_step,
        })
    }
}

fn best_of(validations: &[Validation]) -> Option<usize> {
    validations
        .iter()
        .fold(None::<&Validation>, |best, v| match best {
            Some(b) if b.loss <= v.loss => Some(b),
            _ => Some(v),
        })
        .map(|v| v.step)
}

/// Snapshot written to `config.json` in a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub struct TrainOutcome {
    pub log: RunLog,
    /// Parameters at the lowest validation loss (the initial ones if no
    /// validation ran).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub mean_step_seconds: f64,
}

/// Bins, normalization and loss weights fixed on the training split.
pub fn prepare(dataset: &Dataset, model_config: &ModelConfig, train_config: &TrainConfig) -> Result<CheckpointMeta> {
    if dataset.train.is_empty() || dataset.validation.is_empty() {
        return Err(Error::Data("training needs non-empty train and validation splits".into()));
    }
    let targets: Vec<f64> = dataset.train.iter().map(|r| r.y_reg).collect();
    let bins = BinSpec::from_targets(&targets, model_config.n_bins)?;
    let labels: Vec<usize> = targets.iter().map(|&y| bins.to_bin(y)).collect();
    let norm = NormStats::compute(dataset.train.iter().map(|r| &r.x_raw))?;
    let weights = if train_config.loss_weighting {
        let w = ClassWeights::from_labels(&labels, bins.n)?;
        if train_config.normalize_weights {
            w.mean_normalized()
        } else {
            w
        }
    } else {
        ClassWeights::uniform(bins.n)
    };
    Ok(CheckpointMeta {
        model: model_config.clone(),
        bins,
        norm,
        weights,
    })
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(root: &Path, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(root.join(CHECKPOINT_DIR))?;
        let json = serde_json::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(root.join(CONFIG_FILE), json + "\n")?;
        Ok(Self { root: root.to_path_buf() })
    }

    fn save_best(&self, step: usize, ck: &Checkpoint) -> Result<()> {
        let rel = Path::new(CHECKPOINT_DIR).join(checkpoint_name(step));
        ck.save(&self.root.join(&rel))?;
        let link = self.root.join(BEST_LINK);
        if link.symlink_metadata().is_ok() {
            std::fs::remove_file(&link)?;
        }
        #[cfg(unix)]
        std::os::unix::fs::symlink(&rel, &link)?;
        #[cfg(not(unix))]
        std::fs::write(&link, rel.to_string_lossy().as_bytes())?;
        Ok(())
    }
}

/// Trains from freshly initialized parameters. With `run_dir`, writes the
/// config snapshot, the initial checkpoint, a checkpoint at every
/// validation-loss improvement (linked as `best`) and the logs.
pub fn train(
    train_config: &TrainConfig,
    model_config: &ModelConfig,
    dataset: &Dataset,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_config.validate()?;
    model_config.validate()?;
    let shape = dataset.train[0].x_raw.shape().to_vec();
    if shape != model_config.input_shape() {
        return Err(Error::Config(format!(
            "dataset inputs are {shape:?} but the model expects {:?}",
            model_config.input_shape()
        )));
    }
    let meta = prepare(dataset, model_config, train_config)?;
    let normalize = |records: &[SampleRecord]| -> Result<(Vec<Tensor>, Vec<usize>)> {
        let xs = records.iter().map(|r| meta.norm.normalize(&r.x_raw)).collect::<Result<_>>()?;
        Ok((xs, records.iter().map(|r| meta.bins.to_bin(r.y_reg)).collect()))
    };
    let (train_x, train_y) = normalize(&dataset.train)?;
    let (val_x, val_y) = normalize(&dataset.validation)?;

    // records grouped by region, for region-then-record sampling
    let mut by_region: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, r) in dataset.train.iter().enumerate() {
        by_region.entry(r.origin.region).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = by_region.into_values().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut params = Params::init(model_config, &mut rng)?;
    let mut state = AdamState::new(&params);
    let run = match run_dir {
        Some(dir) => Some(RunDir::create(
            dir,
            &RunConfig {
                model: model_config.clone(),
                train: train_config.clone(),
            },
        )?),
        None => None,
    };
    let mut best = Checkpoint::new(meta.clone(), params.clone())?;
    if let Some(run) = &run {
        run.save_best(0, &best)?;
    }

    let pool = thread_pool()?;
    let mut log = RunLog::default();
    let started = Instant::now();
    for step in 1..=train_config.max_steps {
        let batch: Vec<(&Tensor, usize)> = (0..train_config.batch_size)
            .map(|_| {
                let group = &groups[rng.random_range(0..groups.len())];
                let i = group[rng.random_range(0..group.len())];
                (&train_x[i], train_y[i])
            })
            .collect();
        let (loss, mut grads) = pool
            .install(|| batch_gradient(&params, model_config, &batch, &meta.weights))
            .map_err(|e| match e {
                Error::Numeric(m) => {
                    Error::Numeric(format!("step {step}, lr {}: {m}", train_config.learning_rate))
                }
                other => other,
            })?;
        let norm = grad_norm(&grads);
        if !loss.is_finite() || !norm.is_finite() {
            let mut dump = format!(
                "non-finite training state at step {step}: loss {loss}, lr {}, grad norm {norm}; per tensor:",
                train_config.learning_rate
            );
            for (name, g) in params.names().iter().zip(&grads) {
                let _ = write!(dump, " {name}={:e}", grad_norm(std::slice::from_ref(g)));
            }
            return Err(Error::Numeric(dump));
        }
        if let Some(clip) = train_config.grad_clip {
            if norm > clip {
                grads.iter_mut().flatten().for_each(|g| *g *= clip / norm);
            }
        }
        adam_step(&mut params, &grads, &mut state, train_config)?;
        log.train_loss.push((step, loss));
        log::debug!("step {step} loss {loss:.6} grad norm {norm:.3e}");

        if step % train_config.val_interval == 0 || step == train_config.max_steps {
            let probs = pool.install(|| predict_records(&params, model_config, &val_x))?;
            let batch = PredictionBatch::new(probs, val_y.clone())?;
            let report = MetricReport::compute(&batch, &meta.weights)?;
            let val_loss = report.wcce;
            log::info!(
                "step {step}: train loss {loss:.4}, val loss {val_loss:.4}, BW-Top-3 {:.3}, BW-CRPS {:.3}",
                report.bw_top3,
                report.bw_crps
            );
            let improved = log.best().is_none_or(|b| val_loss < b.loss);
            log.validations.push(Validation {
                step,
                loss: val_loss,
                report,
            });
            if improved {
                log.best_step = Some(step);
                best = Checkpoint::new(meta.clone(), params.clone())?;
                if let Some(run) = &run {
                    run.save_best(step, &best)?;
                }
            }
        }
    }
    let mean_step_seconds = if train_config.max_steps > 0 {
        started.elapsed().as_secs_f64() / train_config.max_steps as f64
    } else {
        0.0
    };
    if let Some(run) = &run {
        log.write(&run.root)?;
    }
    Ok(TrainOutcome {
        log,
        best,
        last: Checkpoint::new(meta, params)?,
        mean_step_seconds,
    })
}

/// Metrics of a checkpoint on records labelled with `bins`.
pub fn evaluate(checkpoint: &Checkpoint, records: &[SampleRecord], bins: &BinSpec) -> Result<MetricReport> {
    if *bins != checkpoint.meta.bins {
        return Err(Error::Config(format!(
            "split bins {bins:?} differ from checkpoint bins {:?}",
            checkpoint.meta.bins
        )));
    }
    let inputs = records
        .iter()
        .map(|r| checkpoint.meta.norm.normalize(&r.x_raw))
        .collect::<Result<Vec<_>>>()?;
    let probs = predict_records(&checkpoint.params, &checkpoint.meta.model, &inputs)?;
    let batch = PredictionBatch::new(probs, records.iter().map(|r| r.label).collect())?;
    MetricReport::compute(&batch, &checkpoint.meta.weights)
}
