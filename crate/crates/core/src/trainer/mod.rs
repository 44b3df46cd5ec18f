//! Optimisation loop: AdamW, reduce-on-plateau, early stopping on the total
//! validation loss, checkpointing and JSON-lines logging.

mod adamw;
mod schedule;

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adamw::{adamw_step, grad_norm, AdamState, AdamWParams, Moments};
pub use schedule::{EpochDecision, PlateauConfig, PlateauState};

use crate::agf::mean_attention;
use crate::config::RunConfig;
use crate::data::{self, epoch_rng, ImageSet};
use crate::error::{Error, Result};
use crate::losses::{self, LossReport};
use crate::metrics::{self, Mask};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, CrackSegmenter, PredictionBatch};
use crate::nnops::{NormMode, Tape, Tensor};

pub use crate::config::TrainConfig;

/// Offset separating the augmentation stream from the shuffle stream.
const AUGMENT_SEED_OFFSET: u64 = 0x5bd1_e995;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub variant: String,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub train_ce: f64,
    pub train_inter: f64,
    pub train_intra: f64,
    pub train_total: f64,
    /// Total loss of every optimisation step, in order.
    pub step_totals: Vec<f64>,
    pub val_ce: f64,
    pub val_inter: f64,
    pub val_intra: f64,
    pub val_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_dice: Option<f64>,
    /// Share of validation pixels predicted as crack.
    pub pos_pixel_fraction: f64,
    /// Mean fusion weights (large, small, fine) over the training steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_weights: Option<[f64; 3]>,
    pub improved: bool,
    pub lr_reduced: bool,
    /// Mask bytes read while optimising; always zero.
    pub mask_bytes_read_training: u64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub step: u64,
    pub plateau: PlateauState,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(lr0: f64) -> Self {
        Self { epoch: 0, step: 0, plateau: PlateauState::new(lr0), best_epoch: None, stopped_early: false, history: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub variant: String,
    pub seed: u64,
    pub epochs_run: usize,
    pub steps: u64,
    pub stopped_early: bool,
    pub best_epoch: Option<usize>,
    pub best_val_total: Option<f64>,
    pub final_lr: f64,
    pub lr_halvings: usize,
    pub final_train_total: Option<f64>,
    pub final_val_total: Option<f64>,
    pub final_val_miou: Option<f64>,
    pub final_val_dice: Option<f64>,
    pub train_images: usize,
    pub val_images: usize,
}

/// Aggregated validation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ValReport {
    pub loss: LossReport,
    pub miou: Option<f64>,
    pub dice: Option<f64>,
    pub pos_pixel_fraction: f64,
}

/// A training run in progress.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: CrackSegmenter,
    pub adam: AdamState,
    pub state: TrainState,
    pub train: ImageSet,
    pub val: ImageSet,
    val_masks: Option<Option<Vec<Mask>>>,
}

fn weighted_add(acc: &mut LossReport, r: &LossReport, n: f64) {
    acc.ce += r.ce * n;
    acc.inter += r.inter * n;
    acc.intra += r.intra * n;
    acc.total += r.total * n;
}

fn scale_report(acc: &mut LossReport, n: f64) {
    acc.ce /= n;
    acc.inter /= n;
    acc.intra /= n;
    acc.total /= n;
}

impl Trainer {
    /// Loads the split and initialises a fresh model.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = CrackSegmenter::new(cfg.model.clone())?;
        let state = TrainState::new(cfg.train.lr0);
        Self::assemble(cfg, model, AdamState::default(), state)
    }

    /// Continues from a checkpoint; the model configuration must match.
    pub fn resume(cfg: RunConfig, ckpt: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.model.config() != &cfg.model {
            return Err(Error::Config("checkpoint model configuration differs from the run configuration".into()));
        }
        let state = ckpt.train.ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        Self::assemble(cfg, ckpt.model, ckpt.adam, state)
    }

    fn assemble(cfg: RunConfig, model: CrackSegmenter, adam: AdamState, state: TrainState) -> Result<Self> {
        let split = data::load_split(&cfg.data)?;
        let train = ImageSet::load(&split.train, cfg.data.resize)?;
        let val = ImageSet::load(&split.val, cfg.data.resize)?;
        Ok(Self { cfg, model, adam, state, train, val, val_masks: None })
    }

    pub fn lr(&self) -> f64 {
        self.state.plateau.lr
    }

    /// One optimisation step on `images`. Returns the losses before the update
    /// and the mean fusion weights, when the variant fuses.
    pub fn step(&mut self, images: &Tensor<f32>) -> Result<(LossReport, Option<[f64; 3]>)> {
        let mut tape = Tape::new();
        let out = self.model.forward(&mut tape, images, NormMode::Train)?;
        let lv = losses::compute(&mut tape, &out, &self.cfg.loss)?;
        let report = lv.report(&tape);
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {} at epoch {} step {}",
                report.total, self.state.epoch, self.state.step
            )));
        }
        let weights = out.fusion.as_ref().map(|v| mean_attention(tape.value(v.attn)));
        let running = out.running;
        let grads = tape.backward(lv.total)?.into_params();
        let t = &self.cfg.train;
        adamw_step(&mut self.model.params, &grads, &mut self.adam, self.state.plateau.lr, &t.adamw(), t.clip())?;
        self.model.commit_running(running)?;
        self.state.step += 1;
        Ok((report, weights))
    }

    fn val_masks(&mut self) -> Result<Option<&[Mask]>> {
        if self.val_masks.is_none() {
            let masks = if self.cfg.train.val_metrics {
                let found: Vec<Option<PathBuf>> = self.val.paths.iter().map(|p| data::find_mask(&self.cfg.data, p)).collect();
                if found.iter().all(Option::is_some) && !found.is_empty() {
                    Some(found.into_iter().flatten().map(|p| data::load_mask(&p, self.cfg.data.resize)).collect::<Result<Vec<_>>>()?)
                } else {
                    None
                }
            } else {
                None
            };
            self.val_masks = Some(masks);
        }
        Ok(self.val_masks.as_ref().unwrap().as_deref())
    }

    /// Eval-mode losses on the validation split, plus mask metrics when
    /// reference masks exist (reporting only).
    pub fn validate(&mut self) -> Result<ValReport> {
        let bs = self.cfg.train.batch_size;
        let n = self.val.len();
        let mut acc = LossReport::default();
        let mut preds: Vec<Mask> = Vec::with_capacity(n);
        let mut positive = 0usize;
        let mut pixels = 0usize;
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(bs) {
            let images = self.val.batch(chunk, None)?;
            let mut tape = Tape::new();
            let out = self.model.forward(&mut tape, &images, NormMode::Eval)?;
            let lv = losses::compute(&mut tape, &out, &self.cfg.loss)?;
            let r = lv.report(&tape);
            weighted_add(&mut acc, &r, chunk.len() as f64);
            let batch = PredictionBatch::from_probs(tape.value(out.probs).clone())?;
            for m in batch.masks {
                positive += m.count();
                pixels += m.data().len();
                preds.push(m);
            }
        }
        scale_report(&mut acc, n as f64);
        if !acc.total.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {} at epoch {}", acc.total, self.state.epoch)));
        }
        let (mut miou, mut dice) = (None, None);
        if let Some(masks) = self.val_masks()? {
            let mut sm = 0.0;
            let mut sd = 0.0;
            for (p, g) in preds.iter().zip(masks) {
                sm += metrics::miou(p, g)?;
                sd += metrics::dice(p, g)?;
            }
            miou = Some(sm / n as f64);
            dice = Some(sd / n as f64);
        }
        Ok(ValReport { loss: acc, miou, dice, pos_pixel_fraction: positive as f64 / pixels.max(1) as f64 })
    }

    /// Trains one epoch and runs the epoch-end bookkeeping, without writing files.
    pub fn run_epoch(&mut self) -> Result<(EpochRecord, EpochDecision)> {
        let started = Instant::now();
        let epoch = self.state.epoch;
        let seed = self.cfg.train.seed;
        let lr = self.state.plateau.lr;
        let order = data::batches(self.train.len(), self.cfg.train.batch_size, seed, epoch as u64);
        let mut aug_rng = epoch_rng(seed.wrapping_add(AUGMENT_SEED_OFFSET), epoch as u64);

        data::reset_mask_bytes_read();
        let mut acc = LossReport::default();
        let mut step_totals = Vec::with_capacity(order.len());
        let mut weight_acc: Option<[f64; 3]> = None;
        for idx in &order {
            let aug = self.cfg.augment.enabled.then_some((&self.cfg.augment, &mut aug_rng));
            let images = self.train.batch(idx, aug)?;
            let (r, w) = self.step(&images)?;
            weighted_add(&mut acc, &r, idx.len() as f64);
            step_totals.push(r.total);
            if let Some(w) = w {
                let a = weight_acc.get_or_insert([0.0; 3]);
                for i in 0..3 {
                    a[i] += w[i] / order.len() as f64;
                }
            }
        }
        scale_report(&mut acc, self.train.len() as f64);
        let mask_bytes = data::mask_bytes_read();

        let val = self.validate()?;
        let decision = self.state.plateau.observe(val.loss.total, &self.cfg.train.plateau());
        if decision.improved {
            self.state.best_epoch = Some(epoch);
        }
        let record = EpochRecord {
            epoch,
            variant: self.model.variant().name().to_string(),
            lr,
            train_ce: acc.ce,
            train_inter: acc.inter,
            train_intra: acc.intra,
            train_total: acc.total,
            step_totals,
            val_ce: val.loss.ce,
            val_inter: val.loss.inter,
            val_intra: val.loss.intra,
            val_total: val.loss.total,
            val_miou: val.miou,
            val_dice: val.dice,
            pos_pixel_fraction: val.pos_pixel_fraction,
            fusion_weights: weight_acc,
            improved: decision.improved,
            lr_reduced: decision.lr_reduced,
            mask_bytes_read_training: mask_bytes,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        self.state.history.push(record.clone());
        self.state.epoch += 1;
        self.state.stopped_early = decision.stop;
        Ok((record, decision))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            train: Some(self.state.clone()),
            run: Some(self.cfg.clone()),
        }
    }

    pub fn summary(&self) -> FitSummary {
        let last = self.state.history.last();
        FitSummary {
            variant: self.model.variant().name().to_string(),
            seed: self.cfg.train.seed,
            epochs_run: self.state.history.len(),
            steps: self.state.step,
            stopped_early: self.state.stopped_early,
            best_epoch: self.state.best_epoch,
            best_val_total: self.state.plateau.best,
            final_lr: self.state.plateau.lr,
            lr_halvings: self.state.plateau.halvings,
            final_train_total: last.map(|r| r.train_total),
            final_val_total: last.map(|r| r.val_total),
            final_val_miou: last.and_then(|r| r.val_miou),
            final_val_dice: last.and_then(|r| r.val_dice),
            train_images: self.train.len(),
            val_images: self.val.len(),
        }
    }

    /// Runs epochs until the budget or early stop, writing `last.ckpt` after
    /// every epoch, `best.ckpt` on improvement, one log line per epoch and a
    /// final summary. A non-finite loss aborts with the previous checkpoints
    /// left untouched.
    pub fn fit(&mut self) -> Result<FitSummary> {
        let dir = self.cfg.output_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let log_path = dir.join(LOG_FILE);
        let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        for r in &self.state.history {
            write_log_line(&mut log, &log_path, r)?;
        }
        while self.state.epoch < self.cfg.train.max_epochs && !self.state.stopped_early {
            let (record, decision) = self.run_epoch()?;
            log::info!(
                "epoch {} lr {:.3e} train {:.5} val {:.5}{}",
                record.epoch,
                record.lr,
                record.train_total,
                record.val_total,
                record.val_miou.map(|m| format!(" mIoU {m:.4}")).unwrap_or_default()
            );
            write_log_line(&mut log, &log_path, &record)?;
            let ckpt = self.checkpoint();
            save_checkpoint(&dir.join(LAST_CHECKPOINT), &ckpt)?;
            if decision.improved {
                save_checkpoint(&dir.join(BEST_CHECKPOINT), &ckpt)?;
            }
        }
        let summary = self.summary();
        let path = dir.join(SUMMARY_FILE);
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(summary)
    }
}

fn write_log_line(log: &mut File, path: &Path, r: &EpochRecord) -> Result<()> {
    let line = serde_json::to_string(r).expect("record serializes");
    writeln!(log, "{line}").map_err(|e| Error::io(path, e))
}

/// Fresh run.
pub fn fit(cfg: &RunConfig) -> Result<FitSummary> {
    Trainer::new(cfg.clone())?.fit()
}

/// Continues the run stored in `checkpoint`.
pub fn resume(cfg: &RunConfig, checkpoint: &Path) -> Result<FitSummary> {
    let ckpt = load_checkpoint(checkpoint)?;
    Trainer::resume(cfg.clone(), ckpt)?.fit()
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}
