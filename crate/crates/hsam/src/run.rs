//! Train, evaluate and verify drivers that tie the core to files.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use hsam_core::config::RunConfig;
use hsam_core::data::{class_frequencies, Dataset};
use hsam_core::metrics::{HdVariant, MetricReport};
use hsam_core::train::Trainer;
use hsam_core::verify::{self, VerifyReport};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{config_hash, hex};
use crate::error::{io_err, usage, Result};
use crate::log::EpochRecord;
use crate::pgm;

pub const LOG_FILE: &str = "train.log";
pub const FINAL_CHECKPOINT: &str = "final.hck";

pub fn checkpoint_name(epochs_done: u64) -> String {
    format!("checkpoint-{epochs_done:04}.hck")
}

/// Dataset extents and classes must match the model.
pub fn check_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let size = cfg.model.encoder.image_size;
    if ds.height != size || ds.width != size {
        return Err(usage(format!("dataset is {}×{}, model expects {size}×{size}", ds.height, ds.width)));
    }
    if ds.classes != cfg.model.decoder.classes {
        return Err(usage(format!("dataset has {} classes, model has {}", ds.classes, cfg.model.decoder.classes)));
    }
    if ds.is_empty() {
        return Err(usage("dataset is empty"));
    }
    Ok(())
}

pub struct TrainPlan<'a> {
    pub cfg: &'a RunConfig,
    pub train: &'a Dataset,
    pub eval: Option<&'a Dataset>,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub records: Vec<EpochRecord>,
    pub final_checkpoint: PathBuf,
    /// Training ended before `epochs` because eval Dice reached the target.
    pub reached_target: bool,
}

/// Runs (or resumes) training, appending one record per epoch to
/// `out/train.log` and writing checkpoints at the configured cadence and at
/// the end. `on_epoch` sees every record as it is written.
pub fn train(plan: &TrainPlan<'_>, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let cfg = plan.cfg;
    check_dataset(cfg, plan.train)?;
    if let Some(e) = plan.eval {
        check_dataset(cfg, e)?;
    }
    std::fs::create_dir_all(plan.out).map_err(io_err(plan.out))?;
    let log_path = plan.out.join(LOG_FILE);
    let (mut trainer, mut log) = match plan.resume {
        Some(path) => {
            let t = checkpoint::restore(&Checkpoint::read(path)?, Some(cfg))?;
            let log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_err(&log_path))?;
            (t, log)
        }
        None => {
            let table = class_frequencies(plan.train, &cfg.data.noise).table;
            let t = Trainer::new(cfg, table)?;
            let mut log = File::create(&log_path).map_err(io_err(&log_path))?;
            writeln!(
                log,
                "run seed={} config_hash={} train_samples={} eval_samples={}",
                cfg.seed,
                hex(&config_hash(cfg)),
                plan.train.len(),
                plan.eval.map_or(0, Dataset::len)
            )
            .map_err(io_err(&log_path))?;
            (t, log)
        }
    };
    let mut records = Vec::new();
    let mut reached_target = false;
    while trainer.epoch < cfg.train.epochs {
        let stats = trainer.train_epoch(plan.train)?;
        let done = trainer.epoch;
        let due = cfg.train.eval_every > 0 && (done % cfg.train.eval_every == 0 || done == cfg.train.epochs);
        let metrics = match plan.eval {
            Some(ds) if due => Some(trainer.evaluate(ds, HdVariant::Avg)?.0),
            _ => None,
        };
        let rec = EpochRecord {
            epoch: stats.epoch,
            lambda_w: stats.lambda_w,
            loss_stage1: stats.stage1,
            loss_stage2: stats.stage2,
            loss_total: stats.total,
            lr: stats.lr,
            steps: stats.steps,
            eval_dice: metrics.as_ref().map(|m| m.mean_dice),
            eval_hd: metrics.as_ref().and_then(|m| m.mean_hd),
        };
        writeln!(log, "{}", rec.to_line()).map_err(io_err(&log_path))?;
        on_epoch(&rec);
        records.push(rec);
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 {
            let path = plan.out.join(checkpoint_name(done));
            checkpoint::from_trainer(&trainer).write(&path)?;
        }
        if let (Some(target), Some(m)) = (cfg.train.target_dice, &metrics) {
            if m.mean_dice >= target {
                reached_target = true;
                break;
            }
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    let final_checkpoint = plan.out.join(FINAL_CHECKPOINT);
    checkpoint::from_trainer(&trainer).write(&final_checkpoint)?;
    Ok(TrainOutcome { trainer, records, final_checkpoint, reached_target })
}

pub struct Evaluation {
    pub report: MetricReport,
    pub predictions: Vec<Vec<u8>>,
}

/// Loads a checkpoint (checking its architecture against `expected` if
/// given) and evaluates it on `ds`.
pub fn evaluate_checkpoint(
    path: &Path,
    expected: Option<&RunConfig>,
    ds: &Dataset,
    variant: HdVariant,
) -> Result<Evaluation> {
    let trainer = checkpoint::restore(&Checkpoint::read(path)?, expected)?;
    check_dataset(&trainer.cfg, ds)?;
    let (report, predictions) = trainer.evaluate(ds, variant)?;
    Ok(Evaluation { report, predictions })
}

/// Writes `pred_NNNN.pgm` and `gt_NNNN.pgm` for every sample.
pub fn dump_masks(dir: &Path, ds: &Dataset, predictions: &[Vec<u8>]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, (p, s)) in predictions.iter().zip(&ds.samples).enumerate() {
        pgm::write(&dir.join(format!("pred_{i:04}.pgm")), p, ds.height, ds.width, ds.classes)?;
        pgm::write(&dir.join(format!("gt_{i:04}.pgm")), &s.mask, ds.height, ds.width, ds.classes)?;
    }
    Ok(())
}

pub fn verify(cfg: &RunConfig, seeds: u64) -> Result<VerifyReport> {
    Ok(verify::run(cfg, seeds)?)
}

/// One line per check: `PASS|FAIL name measured=… tolerance=… detail`.
pub fn verify_lines(r: &VerifyReport) -> String {
    r.checks
        .iter()
        .map(|c| {
            format!(
                "{} {} measured={} tolerance={} {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance,
                c.detail
            )
        })
        .collect()
}
