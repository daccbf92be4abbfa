use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use conic_vp_cli::{
    bench_csv, cmd_bench, cmd_detect_dataset, cmd_detect_images, cmd_eval, cmd_sample, cmd_synth, cmd_train,
    config::DEFAULT_CONFIG, parse_shape, read_predictions, write_json, RunConfig, SplitArg,
};

#[derive(Parser)]
#[command(name = "conic-vp", version, about = "Vanishing point detection with conic convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. --set rounds=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the default configuration, with comments.
    InitConfig {
        #[arg(long, default_value = "conic-vp.toml")]
        out: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; defaults to `dataset_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a dataset's train split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Weight file; the sidecar is written next to it as .json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV training log; defaults to the weight path with .log.csv.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Detect vanishing points in PNG images or a dataset split.
    Detect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Read images from this dataset instead of positional paths.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Predictions JSON; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        images: Vec<PathBuf>,
    },
    /// Score predictions against dataset labels.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Directory for curve.csv and summary.json; defaults to `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the Fibonacci lattice of a cap around the optical axis.
    Sample {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 90.0)]
        gamma_deg: f64,
        #[arg(long, default_value_t = conic_vp::sphere_sampling::DEFAULT_GRID_FACTOR)]
        grid_factor: usize,
    },
    /// Time the conic convolution kernels.
    Bench {
        #[arg(long, default_value = "1x64x64x64")]
        shape: String,
        #[arg(long, value_delimiter = ',', default_value = "1,8")]
        workers: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

fn init_workers(cfg: &RunConfig) {
    if cfg.workers > 0 {
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { out } => {
            std::fs::write(&out, DEFAULT_CONFIG).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {}", out.display());
        }
        Command::Synth { cfg, out } => {
            let cfg = cfg.load()?;
            init_workers(&cfg);
            let dir = out.unwrap_or_else(|| cfg.dataset_dir.clone());
            let index = cmd_synth(&cfg, &dir)?;
            eprintln!("wrote {} samples to {}", index.samples.len(), dir.display());
        }
        Command::Train { cfg, dataset, out, log } => {
            let cfg = cfg.load()?;
            init_workers(&cfg);
            let dataset = dataset.unwrap_or_else(|| cfg.dataset_dir.clone());
            let out = out.unwrap_or_else(|| cfg.model_path.clone());
            let log = log.unwrap_or_else(|| out.with_extension("log.csv"));
            cmd_train(&cfg, &dataset, &out, Some(&log), |l| {
                eprintln!("epoch {:>3}  loss {:.5}  {:.1}s", l.epoch, l.loss, l.seconds)
            })?;
            eprintln!("wrote {}", out.display());
        }
        Command::Detect {
            cfg,
            model,
            dataset,
            split,
            out,
            images,
        } => {
            let cfg = cfg.load()?;
            init_workers(&cfg);
            let model = model.unwrap_or_else(|| cfg.model_path.clone());
            let preds = match dataset {
                Some(d) => cmd_detect_dataset(&cfg, &model, &d, split)?,
                None => {
                    anyhow::ensure!(!images.is_empty(), "no images given (pass paths or --dataset)");
                    cmd_detect_images(&cfg, &model, &images)?
                }
            };
            match out {
                Some(p) => write_json(&p, &preds)?,
                None => println!("{}", serde_json::to_string_pretty(&preds)?),
            }
        }
        Command::Eval {
            cfg,
            predictions,
            dataset,
            split,
            out,
        } => {
            let cfg = cfg.load()?;
            init_workers(&cfg);
            let preds = read_predictions(&predictions)?;
            let dataset = dataset.unwrap_or_else(|| cfg.dataset_dir.clone());
            let (curve, summary) = cmd_eval(&cfg, &preds, &dataset, split)?;
            let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let csv = dir.join("curve.csv");
            std::fs::write(&csv, curve.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
            write_json(&dir.join("summary.json"), &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Sample { n, gamma_deg, grid_factor } => print!("{}", cmd_sample(n, gamma_deg, grid_factor)?),
        Command::Bench {
            shape,
            workers,
            repeats,
        } => print!("{}", bench_csv(&cmd_bench(parse_shape(&shape)?, &workers, repeats)?)),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one line: the error chain joined by ": "
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
