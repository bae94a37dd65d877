//! Stage execution, curriculum and end-to-end regimes.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::optim::{AdamW, AdamWParams};
use super::plan::{Stage, StagePlan, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::metrics::{top_k, transition_accuracy};
use crate::frontend::DatasetRecord;
use crate::model::{load_model, save_model, CheckpointMeta, ForwardOptions, Model, ModelConfig, ParamStore, Sample, TrainMask};
use crate::rng::{nested_rng, Domain};

/// Training and validation records of one dataset.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a [DatasetRecord],
    pub val: &'a [DatasetRecord],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lrs: Vec<(&'static str, f64)>,
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_transition: Option<f64>,
}

impl EpochRecord {
    pub fn log_line(&self, stage: Stage) -> String {
        let mut s = format!("stage={stage} epoch={}", self.epoch);
        for (name, lr) in &self.lrs {
            s.push_str(&format!(" lr.{name}={lr:.6e}"));
        }
        s.push_str(&format!(" loss={:.6} val_top1={:.6}", self.train_loss, self.val_top1));
        match self.val_transition {
            Some(v) => s.push_str(&format!(" val_transition={v:.6}")),
            None => s.push_str(" val_transition=undefined"),
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stage: Stage,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_top1: f64,
    pub stop_reason: StopReason,
    pub wall_time_s: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn summary(&self) -> String {
        format!(
            "{}: mode={} epochs={} best_epoch={} best_val_top1={:.4} stop={} time={:.1}s",
            self.stage,
            self.stage.mode(),
            self.epochs.len(),
            self.best_epoch,
            self.best_val_top1,
            match self.stop_reason {
                StopReason::Patience => "patience",
                StopReason::MaxEpochs => "max_epochs",
            },
            self.wall_time_s
        )
    }
}

/// Where a stage writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// Echo epoch lines to stderr.
    pub verbose: bool,
}

pub fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.bin", stage.name()))
}

/// Per-stage epoch log; rewritten from scratch whenever the stage runs.
pub fn log_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.log", stage.name()))
}

fn sample(r: &DatasetRecord) -> Sample<'_> {
    Sample {
        x: &r.x,
        scene: r.scene,
        speed_norm: r.speed_norm,
    }
}

/// First-block inputs, valid while every embedding tensor is frozen.
fn embed_all(model: &Model<f32>, records: &[DatasetRecord]) -> Result<Vec<Vec<f32>>> {
    records.par_iter().map(|r| model.embed(&sample(r))).collect()
}

fn validate_epoch(
    model: &Model<f32>,
    records: &[DatasetRecord],
    cache: Option<&[Vec<f32>]>,
    plan: &StagePlan,
) -> Result<(f64, Option<f64>)> {
    let opts = ForwardOptions::eval(plan.mode);
    let preds: Vec<usize> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let t = match cache {
                Some(c) => model.forward_from_embedding(&sample(r), &c[i], &opts)?,
                None => model.forward(&sample(r), &opts)?,
            };
            Ok(top_k(&t.logits, 1)[0])
        })
        .collect::<Result<_>>()?;
    let targets: Vec<usize> = records.iter().map(|r| r.class_id as usize).collect();
    let hits = preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
    let transitions: Vec<bool> = records.iter().map(|r| r.is_transition()).collect();
    Ok((hits as f64 / records.len() as f64, transition_accuracy(&preds, &targets, &transitions).value))
}

/// Summed loss and gradient of `loss/batch_len` over `batch`, reduced chunk by chunk in order.
#[allow(clippy::too_many_arguments)]
fn batch_gradient(
    model: &Model<f32>,
    records: &[DatasetRecord],
    cache: Option<&[Vec<f32>]>,
    batch: &[usize],
    plan: &StagePlan,
    epoch: usize,
    mask: &TrainMask,
) -> Result<(f64, ParamStore<f32>)> {
    let scale = 1.0 / batch.len() as f32;
    let dropout_seed = plan.seed ^ plan.stage.code().wrapping_mul(0xD1B5_4A32_D192_ED03);
    let parts: Vec<(f64, ParamStore<f32>)> = batch
        .par_chunks(plan.chunk_size)
        .map(|chunk| {
            let mut grads = model.params.zeros_like();
            let mut loss = 0.0f64;
            for &i in chunk {
                let opts = ForwardOptions {
                    mode: plan.mode,
                    training: true,
                    dropout_seed,
                    sample_key: ((epoch as u64) << 32) | i as u64,
                };
                let r = &records[i];
                let h0 = cache.map(|c| c[i].as_slice());
                let (l, _) = model.forward_backward(&sample(r), h0, None, r.class_id as usize, &opts, scale, mask, &mut grads)?;
                loss += l as f64;
            }
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut total) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss, total))
}

/// Optimizes the plan's trainable set; leaves the best-validation parameters in `model`.
pub fn run_stage(plan: &StagePlan, model: &mut Model<f32>, splits: Splits, opts: &RunOptions) -> Result<TrainReport> {
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::EmptyDataset(format!("{}: training and validation splits must be non-empty", plan.stage)));
    }
    let n_tensors = model.params.tensors.len();
    let trainable = plan.trainable(&model.layout, n_tensors);
    if !trainable.iter().any(|&b| b) {
        return Err(Error::Config(format!("{}: trainable set is empty for this model", plan.stage)));
    }
    let mask = TrainMask { tensors: trainable.clone() };
    let started = Instant::now();
    let frozen_embedding = !mask.any(&model.layout.embedding_tensors());
    let (train_cache, val_cache) = if frozen_embedding {
        (Some(embed_all(model, splits.train)?), Some(embed_all(model, splits.val)?))
    } else {
        (None, None)
    };
    let hp = AdamWParams {
        weight_decay: plan.weight_decay,
        ..AdamWParams::default()
    };
    let mut opt = AdamW::new(hp, &model.params, &trainable);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut since_best = 0usize;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    if let Some(path) = opts.log.as_ref().filter(|p| p.exists()) {
        std::fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }

    for epoch in 0..plan.max_epochs {
        let lrs = plan.tensor_lrs(&model.layout, n_tensors, epoch);
        let max_lr = lrs.iter().copied().fold(0.0, f64::max);
        order.sort_unstable();
        order.shuffle(&mut nested_rng(plan.seed, Domain::Shuffle, plan.stage.code(), epoch as u64));
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(plan.batch_size).enumerate() {
            let (loss, grads) = batch_gradient(model, splits.train, train_cache.as_deref(), batch, plan, epoch, &mask)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NumericalAbort {
                    stage: plan.stage.name().into(),
                    epoch,
                    batch: b,
                    lr: max_lr,
                });
            }
            loss_sum += loss;
            opt.step(&mut model.params, &grads, &lrs);
        }
        let (val_top1, val_transition) = validate_epoch(model, splits.val, val_cache.as_deref(), plan)?;
        let rec = EpochRecord {
            epoch,
            lrs: plan.group_lrs(epoch),
            train_loss: loss_sum / splits.train.len() as f64,
            val_top1,
            val_transition,
        };
        let line = rec.log_line(plan.stage);
        if opts.verbose {
            eprintln!("{line}");
        }
        if let Some(path) = &opts.log {
            append_line(path, &line)?;
        }
        epochs.push(rec);

        if best.as_ref().is_none_or(|(_, v, _)| val_top1 > *v) {
            best = Some((epoch, val_top1, model.params.clone()));
            since_best = 0;
            if let Some(path) = &opts.checkpoint {
                let meta = CheckpointMeta {
                    stage: plan.stage.name().into(),
                    epoch: epoch as u32,
                    val_top1,
                };
                save_model(model, path, Some(&meta))?;
            }
        } else {
            since_best += 1;
            if since_best >= plan.patience {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    let (best_epoch, best_val_top1, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainReport {
        stage: plan.stage,
        epochs,
        best_epoch,
        best_val_top1,
        stop_reason,
        wall_time_s: started.elapsed().as_secs_f64(),
        checkpoint: opts.checkpoint.clone(),
    })
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Artifact locations for a training run rooted at `dir`.
#[derive(Debug, Clone)]
pub struct TrainSession<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub seed: u64,
    pub dir: &'a Path,
    pub verbose: bool,
}

impl TrainSession<'_> {
    fn options(&self, stage: Stage) -> RunOptions {
        RunOptions {
            checkpoint: Some(checkpoint_path(self.dir, stage)),
            log: Some(log_path(self.dir, stage)),
            verbose: self.verbose,
        }
    }

    /// Runs one stage, starting from the previous stage's checkpoint on disk
    /// (or from initialization for stage 1 and end-to-end).
    pub fn run(&self, stage: Stage, splits: Splits) -> Result<(Model<f32>, TrainReport)> {
        let mut model = match stage.previous() {
            Some(prev) => {
                let path = checkpoint_path(self.dir, prev);
                if !path.exists() {
                    return Err(Error::MissingArtifact(path));
                }
                load_model(self.model, &path)?.0
            }
            None => Model::new(self.model, self.seed)?,
        };
        let plan = StagePlan::new(stage, self.train, self.seed);
        let report = run_stage(&plan, &mut model, splits, &self.options(stage))?;
        Ok((model, report))
    }

    /// Stages 1 → 2 → 3, each loading its predecessor's best checkpoint.
    pub fn curriculum(&self, splits: Splits) -> Result<(Model<f32>, Vec<TrainReport>)> {
        self.stages(&Stage::CURRICULUM, splits)
    }

    pub fn stages(&self, stages: &[Stage], splits: Splits) -> Result<(Model<f32>, Vec<TrainReport>)> {
        let mut reports = Vec::new();
        let mut last = None;
        for &s in stages {
            let (m, r) = self.run(s, splits)?;
            reports.push(r);
            last = Some(m);
        }
        let model = last.ok_or_else(|| Error::Config("no stages requested".into()))?;
        Ok((model, reports))
    }

    pub fn end_to_end(&self, splits: Splits) -> Result<(Model<f32>, TrainReport)> {
        self.run(Stage::EndToEnd, splits)
    }
}
