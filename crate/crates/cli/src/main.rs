use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fftcnn::diagnosis::ChannelMode;
use fftcnn::neuralnet::ModelKind;
use fftcnn::pipeline::Representation;
use fftcnn::synthdata::{FaultCode, Split};
use fftcnn::workflow::{self, Error, RunConfig};

/// Compound-fault diagnosis with per-fault 1D CNNs on FFT features.
#[derive(Parser)]
#[command(name = "fftcnn", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset directory (overrides `paths.dataset`).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData {
        /// Output directory (defaults to the dataset path).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit or apply per-condition normalization statistics.
    #[command(subcommand)]
    Preprocess(Preprocess),
    /// Train per-fault models into a model-set directory.
    Train(TrainArgs),
    /// Evaluate a model set on a dataset split.
    Evaluate {
        #[arg(long)]
        models: PathBuf,
        #[arg(long, default_value = "test_final")]
        split: Split,
        /// Circularly shift every recording by a random offset drawn from this seed.
        #[arg(long)]
        shift_seed: Option<u64>,
        /// Include per-slice FLOPs in the report.
        #[arg(long)]
        flops: bool,
        /// Report directory (defaults to `paths.reports`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the compound label of one recording.
    Diagnose {
        #[arg(long)]
        models: PathBuf,
        recording: PathBuf,
        /// Also print per-fault probabilities.
        #[arg(long)]
        verbose: bool,
    },
    /// Per-slice FLOPs of every model variant.
    Flops,
    /// PCA of one fault model's latent features as parallel-coordinates CSV.
    ExportFeatures {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        fault: FaultCode,
        #[arg(long, default_value = "test_final")]
        split: Split,
        #[arg(long, default_value_t = 32)]
        components: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Preprocess {
    /// Fit min-max statistics on the training split.
    Fit {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the normalized input of one recording for one fault model.
    Apply {
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        fault: FaultCode,
        recording: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Train a single fault model.
    #[arg(long, conflicts_with = "all")]
    fault: Vec<FaultCode>,
    /// Train all 17 fault models.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    representation: Option<Representation>,
    #[arg(long)]
    channels: Option<ChannelMode>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Train fault models concurrently.
    #[arg(long)]
    parallel: bool,
    /// Model-set directory (defaults to `paths.models`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(d) = cli.dataset {
        cfg.paths.dataset = d;
    }
    match cli.command {
        Command::GenData { out } => {
            if let Some(out) = out {
                cfg.paths.dataset = out;
            }
            let manifest = workflow::cmd_gen_data(&cfg)?;
            println!(
                "wrote {} recordings to {}",
                manifest.entries.len(),
                cfg.paths.dataset.display()
            );
        }
        Command::Preprocess(Preprocess::Fit { out }) => {
            workflow::cmd_preprocess_fit(&cfg, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Preprocess(Preprocess::Apply { stats, fault, recording }) => {
            print!("{}", workflow::cmd_preprocess_apply(&cfg, &stats, &recording, fault)?);
        }
        Command::Train(args) => {
            if let Some(r) = args.representation {
                cfg.train.representation = r;
            }
            if let Some(c) = args.channels {
                cfg.train.channel_mode = c;
            }
            if let Some(m) = args.model {
                cfg.train.model = m;
            }
            if let Some(e) = args.epochs {
                cfg.train.epochs = e;
            }
            let faults = if args.all { FaultCode::ALL.to_vec() } else { args.fault };
            let out = args.out.unwrap_or_else(|| cfg.paths.models.clone());
            let set = workflow::cmd_train(&cfg, &faults, &out, args.parallel)?;
            for m in set.models.values() {
                let best = m.log.best().expect("trained for at least one epoch");
                println!("{}: best epoch {} val loss {:.6}", m.fault, best.epoch, best.val_loss);
            }
            println!("model set written to {}", out.display());
        }
        Command::Evaluate { models, split, shift_seed, flops, out } => {
            let out = out.unwrap_or_else(|| cfg.paths.reports.clone());
            let report = workflow::cmd_evaluate(&cfg.paths.dataset, &models, split, shift_seed, flops, &out)?;
            print!("{}", report.to_table());
        }
        Command::Diagnose { models, recording, verbose } => {
            let p = workflow::cmd_diagnose(&models, &recording)?;
            if verbose {
                for (f, prob) in FaultCode::ALL.iter().zip(&p.probabilities) {
                    eprintln!("{f}\t{prob:.4}");
                }
            }
            println!("{}", p.label);
        }
        Command::Flops => print!("{}", workflow::cmd_flops(&cfg)?),
        Command::ExportFeatures { models, fault, split, components, out } => {
            let n = workflow::cmd_export_features(&cfg.paths.dataset, &models, fault, split, components, &out)?;
            println!("wrote {n} rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
