use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use shade_core::data::{self, Dataset};
use shade_core::harness::sweep::{self, SweepArm, SweepSpec};
use shade_core::harness::{self, ExperimentConfig, HarnessError};
use shade_core::par;

#[derive(Parser)]
#[command(
    name = "shade",
    version,
    about = "Train, evaluate and diagnose networks with the SHADE regularizer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics and checkpoints
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory (overrides out_dir in the config)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-1 accuracy of a checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Grid of runs over sample counts, seeds and regularizers
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training-set sizes, e.g. 100,250,1000
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
        /// Run seeds, e.g. 0,1,2
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Regularizer arms, e.g. none,shade:1e-3,shade:1e-2
        #[arg(long, value_delimiter = ',', required = true)]
        regularizers: Vec<String>,
    },
    /// Per-layer entropy report of a checkpoint
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Histogram bins per unit
        #[arg(long, default_value_t = 64)]
        bins: usize,
        /// CSV output file; printed to stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
    Val,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset split from the config
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// IDX image file to use instead of the config's data
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
}

fn load_config(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dataset(cfg: &ExperimentConfig, args: &DataArgs) -> Result<Dataset, HarnessError> {
    if let (Some(i), Some(l)) = (&args.images, &args.labels) {
        return Ok(data::load_idx(i, l)?);
    }
    let splits = harness::load_splits(cfg)?;
    match args.split {
        Split::Train => Ok(splits.train),
        Split::Test => Ok(splits.test),
        Split::Val => splits
            .val
            .ok_or_else(|| HarnessError::Config("config defines no validation set".into())),
    }
}

fn output_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf, HarnessError> {
    flag.or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| HarnessError::Config("no output directory: pass --out or set out_dir".into()))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { common, out } => {
            let mut cfg = load_config(&common)?;
            cfg.out_dir = Some(output_dir(out, &cfg)?);
            let outcome = harness::cmd_train(&cfg)?;
            let last = outcome.last();
            println!(
                "epoch {} train_loss {} train_acc {} test_acc {} best_test_acc {}",
                last.epoch,
                last.train_loss,
                last.train_acc.unwrap_or(f64::NAN),
                outcome.test_acc,
                outcome.best_test_acc
            );
        }
        Command::Eval {
            common,
            data,
            checkpoint,
        } => {
            let cfg = load_config(&common)?;
            let d = dataset(&cfg, &data)?;
            println!("{}", harness::cmd_eval(&checkpoint, &d)?);
        }
        Command::Sweep {
            common,
            out,
            counts,
            seeds,
            regularizers,
        } => {
            let cfg = load_config(&common)?;
            let out = output_dir(out, &cfg)?;
            let arms = regularizers
                .iter()
                .map(|s| s.parse::<SweepArm>())
                .collect::<Result<Vec<_>, _>>()?;
            let spec = SweepSpec { counts, seeds, arms };
            sweep::cmd_sweep(&cfg, &spec, &out)?;
            print!("{}", read(&out.join("best.csv"))?);
        }
        Command::Diagnose {
            common,
            data,
            checkpoint,
            bins,
            out,
        } => {
            let cfg = load_config(&common)?;
            let mut d = dataset(&cfg, &data)?;
            if data.images.is_none() && matches!(data.split, Split::Train) {
                d = harness::diag_subset(&cfg, &d)?;
            }
            let rows = harness::cmd_diagnose(&checkpoint, &d, bins, out.as_deref())?;
            if out.is_none() {
                println!("{}", harness::diagnose::LAYER_HEADER);
                for r in rows {
                    println!("{}", r.csv_fields());
                }
            }
        }
    }
    Ok(())
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    par::init_from_env();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
