use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use satformer::checkpoint::Checkpoint;
use satformer::experiments::{
    ablate_attention, ablate_bins, ablate_loss, attention_table, bins_table, loss_table, Benchmark,
};
use satformer::training::{evaluate, train, RunLog, BEST_LINK};
use satformer::{AttentionMode, Dataset, Error, GeneratorConfig, ModelConfig, TrainConfig};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "satformer", version, about = "Space-time transformer for binned rainfall nowcasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and print its label histogram.
    GenData {
        /// Generator config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Overrides the number of label bins.
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Train one model and write a run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Score a checkpoint on a dataset split and print its metric report.
    Eval {
        /// Checkpoint directory, or a run directory (its best checkpoint is used).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Score the training split instead of validation.
        #[arg(long)]
        train_split: bool,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weighted vs unweighted loss per seed.
    AblateLoss {
        #[command(flatten)]
        run: RunArgs,
    },
    /// The three attention modes per seed.
    AblateAttention {
        #[command(flatten)]
        run: RunArgs,
    },
    /// One model per bin count.
    AblateBins {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64,128")]
        bins: Vec<usize>,
    },
    /// Merge run directories into curve, metric and histogram CSVs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// JSON with optional "model" and "train" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Full-size model and optimizer settings.
    #[arg(long)]
    paper_config: bool,
    #[arg(long)]
    attention: Option<AttentionMode>,
    #[arg(long)]
    no_loss_weighting: bool,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> satformer::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_dataset(dir: &Path) -> satformer::Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())));
    }
    Ok(Dataset::load(dir)?.0)
}

/// Model and optimizer settings for a run. Without a config file or preset
/// the reference benchmark settings are fitted to the dataset's shape.
fn resolve(run: &RunArgs, dataset: &Dataset, bins: Option<usize>) -> satformer::Result<(ModelConfig, TrainConfig)> {
    let file: ExperimentFile = match &run.config {
        Some(p) => read_json(p)?,
        None => ExperimentFile::default(),
    };
    let (mut model, mut train) = if run.paper_config {
        (ModelConfig::full_size(), TrainConfig::full_size())
    } else {
        let b = Benchmark::reference();
        let x = &dataset.train.first().ok_or_else(|| Error::Data("dataset has no training records".into()))?.x_raw;
        let &[frames, channels, height, width] = x.shape() else {
            return Err(Error::Data(format!("unexpected input shape {:?}", x.shape())));
        };
        let fitted = ModelConfig {
            frames,
            channels,
            height,
            width,
            patch: [8, 4, 2, 1].into_iter().find(|p| height % p == 0 && width % p == 0).unwrap_or(1),
            n_bins: dataset.bins.n,
            ..b.model
        };
        (fitted, b.train)
    };
    if let Some(m) = file.model {
        model = m;
    }
    if let Some(t) = file.train {
        train = t;
    }
    if let Some(mode) = run.attention {
        model.attention = mode;
    }
    if let Some(n) = bins {
        model.n_bins = n;
    }
    if run.no_loss_weighting {
        train.loss_weighting = false;
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

fn seeds(run: &RunArgs) -> Vec<u64> {
    if run.seeds.is_empty() {
        vec![1, 2, 3]
    } else {
        run.seeds.clone()
    }
}

fn histogram_csv(h: &[usize]) -> String {
    let mut out = String::from("bin,count\n");
    for (i, c) in h.iter().enumerate() {
        let _ = writeln!(out, "{i},{c}");
    }
    out
}

fn write_out(dir: &Path, name: &str, text: &str) -> satformer::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> satformer::Result<()> {
    match cli.command {
        Command::GenData { config, out, seeds, bins } => {
            let mut g: GeneratorConfig = match config {
                Some(p) => read_json(&p)?,
                None => GeneratorConfig::default(),
            };
            match seeds.as_slice() {
                [] => {}
                [s] => g.seed = *s,
                _ => return Err(Error::Config("gen-data takes a single seed".into())),
            }
            if let Some(n) = bins {
                g.n_bins = n;
            }
            g.validate()?;
            let dataset = Dataset::build(&satformer::SyntheticWorld::generate(&g)?)?;
            fs::create_dir_all(&out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
            dataset.save(&out, &g)?;
            let hist = histogram_csv(&dataset.histogram());
            write_out(&out, "histogram.csv", &hist)?;
            print!("{hist}");
        }
        Command::Train { run, bins } => {
            let dataset = load_dataset(&run.data)?;
            let (model, mut train_cfg) = resolve(&run, &dataset, bins)?;
            match run.seeds.as_slice() {
                [] => {}
                [s] => train_cfg.seed = *s,
                _ => return Err(Error::Config("train takes a single seed".into())),
            }
            let outcome = train(&train_cfg, &model, &dataset, Some(&run.out))?;
            match outcome.log.best() {
                Some(best) => println!(
                    "best step {}: val loss {:.4}, BW-Top-3 {:.4}, BW-CRPS {:.4}",
                    best.step, best.loss, best.report.bw_top3, best.report.bw_crps
                ),
                None => println!("no training steps; initial checkpoint saved"),
            }
        }
        Command::Eval { checkpoint, data, train_split, out } => {
            let dir = if checkpoint.join(BEST_LINK).exists() {
                checkpoint.join(BEST_LINK)
            } else {
                checkpoint
            };
            let ckpt = Checkpoint::load(&dir)?;
            let mut dataset = load_dataset(&data)?;
            if dataset.bins.n != ckpt.meta.bins.n {
                dataset.relabel(ckpt.meta.bins.n)?;
            }
            let records = if train_split { &dataset.train } else { &dataset.validation };
            let report = evaluate(&ckpt, records, &dataset.bins)?;
            let csv = report.to_csv();
            if let Some(path) = out {
                fs::write(&path, &csv).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            }
            print!("{csv}");
        }
        Command::AblateLoss { run } => {
            let dataset = load_dataset(&run.data)?;
            let (model, train_cfg) = resolve(&run, &dataset, None)?;
            let rows = ablate_loss(&model, &train_cfg, &dataset, &seeds(&run), Some(&run.out))?;
            let table = loss_table(&rows);
            write_out(&run.out, "ablate_loss.csv", &table)?;
            print!("{table}");
        }
        Command::AblateAttention { run } => {
            let dataset = load_dataset(&run.data)?;
            let (model, train_cfg) = resolve(&run, &dataset, None)?;
            let rows = ablate_attention(&model, &train_cfg, &dataset, &seeds(&run), Some(&run.out))?;
            let table = attention_table(&rows);
            write_out(&run.out, "ablate_attention.csv", &table)?;
            print!("{table}");
        }
        Command::AblateBins { run, bins } => {
            let dataset = load_dataset(&run.data)?;
            let (model, train_cfg) = resolve(&run, &dataset, None)?;
            let rows = ablate_bins(&model, &train_cfg, &dataset, &bins, &seeds(&run), Some(&run.out))?;
            let table = bins_table(&rows);
            write_out(&run.out, "ablate_bins.csv", &table)?;
            print!("{table}");
        }
        Command::Report { runs, out } => report(&runs, &out)?,
    }
    Ok(())
}

fn run_id(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// `curves.csv` has one row per logged training step, with the validation
/// loss filled in at validation steps.
fn report(runs: &[PathBuf], out: &Path) -> satformer::Result<()> {
    let mut curves = String::from("run,step,train_loss,val_loss\n");
    let mut metrics = String::from("run,step,wcce,top3,crps,bw_top3,bw_crps,best\n");
    let mut hist = String::from("run,bin,count\n");
    for dir in runs {
        let log = RunLog::read(dir)
            .map_err(|e| Error::Config(format!("no run log in {}: {e}", dir.display())))?;
        let id = run_id(dir);
        for &(step, loss) in &log.train_loss {
            let val = log.validations.iter().find(|v| v.step == step).map(|v| format!("{:?}", v.loss));
            let _ = writeln!(curves, "{id},{step},{loss:?},{}", val.unwrap_or_default());
        }
        for v in &log.validations {
            let r = &v.report;
            let _ = writeln!(
                metrics,
                "{id},{},{:?},{:?},{:?},{:?},{:?},{}",
                v.step,
                r.wcce,
                r.top3,
                r.crps_mean,
                r.bw_top3,
                r.bw_crps,
                log.best_step == Some(v.step)
            );
        }
        let ckpt = Checkpoint::load(&dir.join(BEST_LINK))
            .map_err(|e| Error::Config(format!("no checkpoint in {}: {e}", dir.display())))?;
        for (bin, count) in ckpt.meta.weights.histogram.iter().enumerate() {
            let _ = writeln!(hist, "{id},{bin},{count}");
        }
    }
    write_out(out, "curves.csv", &curves)?;
    write_out(out, "metrics.csv", &metrics)?;
    write_out(out, "histogram.csv", &hist)?;
    println!("wrote curves.csv, metrics.csv and histogram.csv to {}", out.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Io(_) | Error::Format { .. } | Error::Data(_) => 2,
        Error::Numeric(_) | Error::Dimension { .. } | Error::Contract(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
