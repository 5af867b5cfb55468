use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gevit::attention::Boundary;
use gevit::config::RunConfig;
use gevit::encoding::PeVariant;
use gevit::harness::errormap::{ErrorMapOptions, ImageSource, Layer};
use gevit::harness::{certify, errormap, eval, train, HarnessError};
use gevit::scalar::Precision;

#[derive(Parser)]
#[command(name = "gevit", version, about = "Group equivariant vision transformer harness")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    precision: Option<Precision>,
    /// c1, c4, c8, c12, c16, d4, d8, ...
    #[arg(long, global = true)]
    group: Option<String>,
    /// attention window side (odd)
    #[arg(long, global = true)]
    neighborhood: Option<usize>,
    #[arg(long, global = true)]
    pe_variant: Option<PeVariant>,
    #[arg(long, global = true)]
    boundary: Option<Boundary>,
    /// output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// extra KEY=VALUE config overrides
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the equivariance certification suite.
    Check,
    /// Write equivariance error maps for one image.
    Errormap {
        /// trained weights; random weights when omitted
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// binary PGM input image
        #[arg(long, conflicts_with = "sample")]
        image: Option<PathBuf>,
        /// validation sample index
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// lifting, blockK or last
        #[arg(long, default_value = "last")]
        layer: String,
        /// index of the rotation applied to the input
        #[arg(long, default_value_t = 1)]
        element: usize,
    },
    /// Train on the synthetic rotated-MNIST split.
    Train {
        /// stop once validation accuracy reaches this value
        #[arg(long)]
        stop_at: Option<f64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Accuracy and confusion counts of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// train or val
        #[arg(long, default_value = "val")]
        split: String,
    },
}

fn load_config(c: &Common) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    if let Some(p) = c.precision {
        cfg.model.precision = p;
    }
    if let Some(g) = &c.group {
        cfg.model.group = g.clone();
    }
    if let Some(n) = c.neighborhood {
        cfg.model.neighborhood = n;
    }
    if let Some(v) = c.pe_variant {
        cfg.model.pe_variant = v;
    }
    if let Some(b) = c.boundary {
        cfg.model.boundary = b;
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| HarnessError::Usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    let cfg = load_config(&cli.common)?;
    let out = |default: &str| cli.common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match cli.command {
        Command::Check => {
            let r = certify::cmd_check(&cfg)?;
            print!("{}", r.render_text());
            if let Some(dir) = &cli.common.out {
                std::fs::create_dir_all(dir).map_err(|e| HarnessError::Usage(format!("{}: {e}", dir.display())))?;
                let path = dir.join("certify.csv");
                std::fs::write(&path, r.render_csv())
                    .map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
                std::fs::write(dir.join("certify.txt"), r.render_text())
                    .map_err(|e| HarnessError::Usage(format!("{}: {e}", dir.display())))?;
            }
            Ok(if r.ok() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Errormap {
            checkpoint,
            image,
            sample,
            layer,
            element,
        } => {
            let opts = ErrorMapOptions {
                checkpoint,
                image: image.map_or(ImageSource::Sample(sample), ImageSource::Pgm),
                layer: layer.parse::<Layer>()?,
                element,
            };
            let r = errormap::cmd_errormap(&cfg, &opts, &out("runs/errormap"))?;
            print!("{}", r.summary());
            println!("average absolute error {:.6e}", r.mean_abs);
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { stop_at, quiet } => {
            let dir = out("runs/train");
            let opts = train::TrainOptions {
                stop_at_accuracy: stop_at,
                verbose: !quiet,
            };
            let r = train::cmd_train(&cfg, &dir, &opts)?;
            println!(
                "best val accuracy {:.4} at epoch {} ({:.1}s); checkpoint {}",
                r.best_accuracy,
                r.best_epoch,
                r.wall,
                r.best_checkpoint.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { checkpoint, split } => {
            let r = eval::cmd_eval(&cfg, checkpoint.as_deref(), &split)?;
            print!("{}", r.render());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
