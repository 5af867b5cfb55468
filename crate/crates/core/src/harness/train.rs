//! Seeded training loop with a line-per-record run log and best-checkpoint
//! tracking.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{batches, load_idx, train_val_split, Dataset};
use crate::harness::eval::predict;
use crate::harness::{io_err, HarnessError, Result};
use crate::network::{train_step, Model, NetworkError};
use crate::optim::Adam;
use crate::scalar::{Precision, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
    pub wall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub best_checkpoint: PathBuf,
    pub log: PathBuf,
    pub wall: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop after the first epoch whose validation accuracy reaches this.
    pub stop_at_accuracy: Option<f64>,
    /// Echo log records to stderr.
    pub verbose: bool,
}

struct Log {
    out: BufWriter<File>,
    verbose: bool,
}

impl Log {
    fn line(&mut self, s: &str) -> Result<()> {
        if self.verbose {
            eprintln!("{s}");
        }
        writeln!(self.out, "{s}").map_err(io_err("writing run log"))?;
        self.out.flush().map_err(io_err("writing run log"))
    }
}

pub fn accuracy<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<f64> {
    let pred = predict(model, data)?;
    let correct = pred.iter().enumerate().filter(|&(i, &p)| p == data.label(i)).count();
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Builds the configured datasets and trains in the configured precision.
/// Writes `run.log`, `config.cfg`, `best.gevt` and `last.gevt` to `out_dir`.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, opts: &TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    let t = &cfg.train;
    let base = load_idx(Path::new(&t.images), Path::new(&t.labels))?;
    let (train, val) = train_val_split(&base, t.seed, t.train_count, t.val_count, t.angle_mode)?;
    match cfg.model.precision {
        Precision::F32 => train_on::<f32>(cfg, &train, &val, out_dir, opts),
        Precision::F64 => train_on::<f64>(cfg, &train, &val, out_dir, opts),
    }
}

pub fn train_on<T: Scalar>(
    cfg: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    std::fs::create_dir_all(out_dir).map_err(io_err(format!("creating {}", out_dir.display())))?;
    let t = &cfg.train;
    let log_path = out_dir.join("run.log");
    let best_path = out_dir.join("best.gevt");
    let last_path = out_dir.join("last.gevt");
    std::fs::write(out_dir.join("config.cfg"), cfg.render()).map_err(io_err("writing config.cfg"))?;
    let file = File::create(&log_path).map_err(io_err(format!("creating {}", log_path.display())))?;
    let mut log = Log {
        out: BufWriter::new(file),
        verbose: opts.verbose,
    };

    let mut model = Model::<T>::build(&cfg.model, t.seed)?;
    let mut opt = Adam::new(t.lr, t.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed.wrapping_add(1));

    log.line("# gevit training run")?;
    log.line(&format!("# parameters: {}", model.parameter_count()))?;
    for l in cfg.render().lines() {
        log.line(&format!("# config {l}"))?;
    }
    for (name, d) in [("train", train), ("val", val)] {
        for l in d.provenance.header(name).lines() {
            log.line(l)?;
        }
        log.line(&format!("#   samples: {}", d.len()))?;
    }

    let start = Instant::now();
    let mut report = TrainReport {
        step_losses: Vec::new(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_accuracy: -1.0,
        best_checkpoint: best_path.clone(),
        log: log_path.clone(),
        wall: 0.0,
    };
    for epoch in 1..=t.epochs {
        let mut sum = 0.0;
        let plan = batches(train.len(), t.batch_size, t.seed, epoch as u64);
        for idx in &plan {
            let batch = idx
                .iter()
                .map(|&i| Ok((model.image(train.image(i))?, train.label(i))))
                .collect::<std::result::Result<Vec<_>, NetworkError>>()?;
            let loss = match train_step(&mut model, &batch, &mut opt, &mut rng) {
                Ok(l) => l,
                Err(NetworkError::NonFiniteLoss { step, loss }) => {
                    checkpoint::save(&model, &last_path)?;
                    log.line(&format!("# aborted: non-finite loss {loss} at step {step}"))?;
                    return Err(HarnessError::Diverged {
                        reason: format!("loss {loss} at step {step}"),
                        checkpoint: last_path.display().to_string(),
                    });
                }
                Err(e) => return Err(e.into()),
            };
            sum += loss;
            report.step_losses.push(loss);
            let step = opt.steps();
            if t.log_every > 0 && step % t.log_every as u64 == 0 {
                log.line(&format!(
                    "step={step} epoch={epoch} loss={loss:.6} lr={} wall={:.3}",
                    t.lr,
                    start.elapsed().as_secs_f64()
                ))?;
            }
        }
        let acc = accuracy(&model, val)?;
        let rec = EpochRecord {
            epoch,
            mean_loss: sum / plan.len().max(1) as f64,
            val_accuracy: acc,
            wall: start.elapsed().as_secs_f64(),
        };
        log.line(&format!(
            "epoch={epoch} train_loss={:.6} val_acc={acc:.4} wall={:.3}",
            rec.mean_loss, rec.wall
        ))?;
        if acc > report.best_accuracy {
            report.best_accuracy = acc;
            report.best_epoch = epoch;
            checkpoint::save(&model, &best_path)?;
        }
        report.epochs.push(rec);
        if opts.stop_at_accuracy.is_some_and(|target| acc >= target) {
            log.line(&format!("# reached target accuracy after epoch {epoch}"))?;
            break;
        }
    }
    checkpoint::save(&model, &last_path)?;
    report.wall = start.elapsed().as_secs_f64();
    log.line(&format!(
        "# done best_epoch={} best_val_acc={:.4} wall={:.3}",
        report.best_epoch, report.best_accuracy, report.wall
    ))?;
    Ok(report)
}
