use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{sample_batch, steps_per_epoch, Batch, Trainer};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::objectives::LossReport;
use crate::synthetic::dataset::{LabeledSplit, UnlabeledSplit};
use crate::synthetic::Domain;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Zero-based index of the step; it also keys the batch sampler.
    pub step: u64,
    pub epoch: u64,
    #[serde(flatten)]
    pub report: LossReport,
}

pub struct FitOutcome {
    pub steps: u64,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub last_report: Option<LossReport>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    std::io::BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&line)?)
        })
        .collect()
}

fn check_data(source: &LabeledSplit, target: &UnlabeledSplit, config: &TrainConfig) -> Result<()> {
    if source.domain != Domain::Source || target.domain != Domain::Target {
        return Err(Error::invalid(
            "data",
            format!("expected source/target splits, got {}/{}", source.domain, target.domain),
        ));
    }
    let s = config.model.image_size;
    for (name, stack) in [("source", &source.images), ("target", &target.images)] {
        if stack.height != s || stack.width != s {
            return Err(Error::invalid(
                "image_size",
                format!("{name} images are {}x{}, config says {s}", stack.height, stack.width),
            ));
        }
    }
    if source.num_aus != config.model.num_aus {
        return Err(Error::invalid(
            "num_aus",
            format!("source split has {} AUs, config says {}", source.num_aus, config.model.num_aus),
        ));
    }
    Ok(())
}

/// Trains for `config.epochs` epochs, writing `metrics.jsonl`, a checkpoint
/// every `checkpoint_every` epochs under `checkpoints/`, and
/// `checkpoints/final.ckpt`.
///
/// With `resume`, training continues from the checkpoint's step; only
/// the remaining rows are written to this directory's log.
pub fn fit(
    source: &LabeledSplit,
    target: &UnlabeledSplit,
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<FitOutcome> {
    config.validate()?;
    check_data(source, target, config)?;
    let spe = steps_per_epoch(source.len(), config.batch_size) as u64;
    let total = spe * config.epochs as u64;
    let mut trainer = match resume {
        Some(ckpt) => {
            if &ckpt.meta.config != config {
                return Err(Error::Checkpoint("resume checkpoint was trained with a different config".into()));
            }
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::new(config)?,
    };
    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = BufWriter::new(file);
    let mut checkpoints = Vec::new();
    let mut last_report = None;
    while trainer.step < total {
        let step = trainer.step;
        let epoch = step / spe;
        let idx = sample_batch(&source.identity_ids, target.len(), config.batch_size, config.seed, step)?;
        let batch = Batch::gather(source, target, &idx);
        let report = match trainer.train_step(&batch) {
            Ok(r) => r,
            Err(e) => {
                log.flush().map_err(|e| Error::io(&metrics_path, e))?;
                return Err(e);
            }
        };
        let row = MetricsRow { step, epoch, report };
        writeln!(log, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(&metrics_path, e))?;
        last_report = Some(report);
        if trainer.step % spe == 0 {
            let done = trainer.step / spe;
            log::info!(
                "epoch {done}/{}: l_total {:.4} l_au_s {:.4} l_rec {:.4} l_icl {:.4} l_fcl {:.4}",
                config.epochs,
                report.l_total,
                report.l_au_s,
                report.l_rec_s + report.l_rec_t,
                report.l_icl,
                report.l_fcl
            );
            if done % config.checkpoint_every as u64 == 0 && trainer.step < total {
                let path = ckpt_dir.join(format!("epoch_{done:04}.ckpt"));
                trainer.checkpoint(done).save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_checkpoint = ckpt_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint(total / spe).save(&final_checkpoint)?;
    checkpoints.push(final_checkpoint.clone());
    Ok(FitOutcome {
        steps: total,
        checkpoints,
        final_checkpoint,
        last_report,
    })
}
