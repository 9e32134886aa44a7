//! Deterministic training loop.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{BestMetric, Checkpoint};
use super::config::{Selection, TrainConfig};
use super::eval::{evaluate_with, Evaluation, Inference};
use super::optim::{clip_global_norm, cosine_lr, Adam};
use crate::autodiff::{Graph, Tensor};
use crate::data::{assemble, make_batches, Batch, FeatureStore, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::losses::{detection_objective, matching_loss, total_loss, DuplicatePolicy};
use crate::metrics::EvalMode;
use crate::model::Made;
use crate::nn::ParamStore;

/// Offset separating the dropout seed from the batch-order seed.
const DROPOUT_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Zero-based index of the step just taken.
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub matching: f64,
    pub detection: f64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Per-epoch validation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub step: u64,
    pub mean_loss: f64,
    pub val_miou: f64,
    pub val_r1: Option<f64>,
    pub selected: f64,
    pub improved: bool,
}

/// Forward and backward pass of one batch; returns the loss terms and per-parameter gradients.
pub fn loss_and_grads(
    model: &Made,
    params: &ParamStore<f32>,
    batch: &Batch,
    policy: DuplicatePolicy,
    rng: ChaCha8Rng,
) -> Result<(f64, f64, f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::training(rng);
    let p = params.bind(&mut g);
    let ve = model.encode_videos(&mut g, &p, &batch.video)?;
    let me = model.encode_music(&mut g, &p, &batch.music)?;
    let sim = model.similarity(&mut g, &p, &ve, &me)?;
    let scale = model.inverse_temperature(&mut g, &p)?;
    let keys = match policy {
        DuplicatePolicy::MaskSameTrack => Some(batch.track_keys.as_slice()),
        DuplicatePolicy::None => None,
    };
    let lm = matching_loss(&mut g, &sim.parts, scale, keys)?;
    let det = model.detect(&mut g, &p, &ve, &me, &batch.video_widths)?;
    let ld = detection_objective(&mut g, &det, &batch.targets)?;
    let loss = total_loss(&mut g, lm, ld)?;
    let grads = g.backward(loss)?;
    let vals = [loss, lm, ld].map(|v| f64::from(g.value(v).item()));
    let grads = params.ids().map(|id| grads.get_or_zeros(p.var(id), params.get(id).shape())).collect();
    Ok((vals[0], vals[1], vals[2], grads))
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    model: Made,
    params: ParamStore<f32>,
    adam: Adam,
    step: u64,
    best: Option<BestMetric>,
    train: &'a Manifest,
    features: &'a FeatureStore,
    d_max: f64,
    steps_per_epoch: u64,
    order: Option<(u64, Vec<Vec<usize>>)>,
}

impl<'a> Trainer<'a> {
    /// Fresh run: parameters are initialised from `cfg.seed`.
    pub fn new(cfg: TrainConfig, train: &'a Manifest, features: &'a FeatureStore) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = Made::init::<f32>(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(params.tensors());
        Self::build(cfg, model, params, adam, 0, None, train, features, train.d_max)
    }

    /// Continues the run saved in `ckpt`.
    pub fn resume(ckpt: Checkpoint, train: &'a Manifest, features: &'a FeatureStore) -> Result<Self> {
        let model = ckpt.model()?;
        let adam = ckpt.optimizer.ok_or_else(|| Error::Data("checkpoint has no optimiser state to resume from".into()))?;
        if ckpt.d_max != train.d_max {
            return Err(Error::Data(format!("checkpoint d_max {} differs from manifest {}", ckpt.d_max, train.d_max)));
        }
        Self::build(ckpt.config, model, ckpt.params, adam, ckpt.step, ckpt.best, train, features, ckpt.d_max)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        cfg: TrainConfig,
        model: Made,
        params: ParamStore<f32>,
        adam: Adam,
        step: u64,
        best: Option<BestMetric>,
        train: &'a Manifest,
        features: &'a FeatureStore,
        d_max: f64,
    ) -> Result<Self> {
        if train.entries.len() < 2 {
            return Err(Error::Data("training needs at least two pairs".into()));
        }
        let steps_per_epoch = make_batches(train.entries.len(), cfg.batch_size, cfg.seed, 0)?.len() as u64;
        Ok(Trainer { cfg, model, params, adam, step, best, train, features, d_max, steps_per_epoch, order: None })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Made {
        &self.model
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch * self.cfg.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn best(&self) -> Option<BestMetric> {
        self.best
    }

    pub fn inference(&self) -> Inference<'_> {
        Inference { model: &self.model, params: &self.params, d_max: self.d_max }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            d_max: self.d_max,
            step: self.step,
            best: self.best,
            params: self.params.clone(),
            optimizer: Some(self.adam.clone()),
        }
    }

    /// Entries of the batch the next step will train on.
    pub fn next_batch(&mut self) -> Result<Vec<&'a ManifestEntry>> {
        let epoch = self.step / self.steps_per_epoch;
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let b = make_batches(self.train.entries.len(), self.cfg.batch_size, self.cfg.seed, epoch)?;
            self.order = Some((epoch, b));
        }
        let (_, batches) = self.order.as_ref().unwrap();
        let idx = &batches[(self.step % self.steps_per_epoch) as usize];
        Ok(idx.iter().map(|&i| &self.train.entries[i]).collect())
    }

    /// One optimiser step on the next batch.
    pub fn step(&mut self) -> Result<StepStats> {
        if self.is_done() {
            return Err(Error::Config("training schedule already complete".into()));
        }
        let entries = self.next_batch()?;
        let batch = assemble(&entries, self.features, self.d_max)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(DROPOUT_SEED_OFFSET));
        rng.set_stream(self.step);
        let (loss, matching, detection, mut grads) = loss_and_grads(&self.model, &self.params, &batch, self.cfg.duplicate_policy, rng)
            .map_err(|e| {
                let ids: Vec<&str> = entries.iter().map(|e| e.video_id.as_str()).collect();
                match e {
                    Error::Tensor(t) if matches!(e.kind(), crate::ErrorKind::Numeric) => {
                        Error::Numeric(format!("step {}: {t}; batch videos {ids:?}", self.step))
                    }
                    other => other,
                }
            })?;
        let grad_norm = match self.cfg.clip_grad_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => super::optim::global_norm(&grads),
        };
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("step {}: non-finite gradient norm", self.step)));
        }
        let lr = cosine_lr(self.step as usize + 1, self.total_steps() as usize, self.cfg.lr, self.cfg.warmup_proportion);
        let mut tensors = self.params.tensors().to_vec();
        self.adam.step(&mut tensors, &grads, lr);
        for (id, t) in self.params.ids().collect::<Vec<_>>().into_iter().zip(tensors) {
            self.params.set(id, t)?;
        }
        let stats = StepStats { step: self.step, epoch: self.step / self.steps_per_epoch, loss, matching, detection, lr, grad_norm };
        self.step += 1;
        Ok(stats)
    }

    /// Validation metrics with the current weights.
    pub fn validate(&self, val: &Manifest, features: &FeatureStore) -> Result<(Evaluation, Option<Evaluation>)> {
        let smg = evaluate_with(self.inference(), val, features, EvalMode::Smg, 1)?;
        let msg = match self.cfg.selection {
            Selection::R1 => Some(evaluate_with(self.inference(), val, features, EvalMode::Msg, self.cfg.detect_top)?),
            Selection::SmgMiou => None,
        };
        Ok((smg, msg))
    }

    /// Records `value` and reports whether it beats the best so far.
    pub fn offer(&mut self, value: f64) -> bool {
        let better = self.best.is_none_or(|b| value > b.value);
        if better {
            self.best = Some(BestMetric { value, step: self.step });
        }
        better
    }
}

/// Files written by [`train`] under its output directory.
pub fn best_path(out: &Path) -> PathBuf {
    out.join("best.ckpt")
}

pub fn last_path(out: &Path) -> PathBuf {
    out.join("last.ckpt")
}

pub fn log_path(out: &Path) -> PathBuf {
    out.join("train_log.jsonl")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub best: Option<BestMetric>,
    pub epochs: Vec<EpochLog>,
}

/// Options for [`train`] beyond the configuration itself.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<Checkpoint>,
    /// Stop (after saving `last.ckpt`) once this many steps have been taken.
    pub stop_after: Option<u64>,
}

/// Trains on `train`, validates on `val` at epoch ends, and keeps `best.ckpt` and `last.ckpt` in `out`.
pub fn train(
    cfg: TrainConfig,
    train: &Manifest,
    val: &Manifest,
    features: &FeatureStore,
    out: &Path,
    opts: RunOptions,
) -> Result<TrainSummary> {
    std::fs::create_dir_all(out)?;
    let mut t = match opts.resume {
        Some(ckpt) => Trainer::resume(ckpt, train, features)?,
        None => Trainer::new(cfg, train, features)?,
    };
    let mut log = std::fs::OpenOptions::new().create(true).append(true).open(log_path(out))?;
    let mut epochs = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    let started = Instant::now();
    log::info!(
        "training {} pairs, {} steps/epoch, {} steps, {} parameters",
        train.entries.len(),
        t.steps_per_epoch(),
        t.total_steps(),
        t.params().num_scalars()
    );
    while !t.is_done() {
        if opts.stop_after.is_some_and(|s| t.step_count() >= s) {
            break;
        }
        let s = match t.step() {
            Ok(s) => s,
            Err(e @ Error::Numeric(_)) => {
                let dump = out.join(format!("nonfinite_step{}.txt", t.step_count()));
                let ids: Vec<String> = t.next_batch()?.iter().map(|e| e.video_id.clone()).collect();
                std::fs::write(&dump, format!("{e}\nbatch: {}\n", ids.join(" ")))?;
                log::error!("{e}; batch written to {}", dump.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        loss_sum += s.loss;
        loss_n += 1;
        log::debug!("step {} loss {:.5} (match {:.5}, det {:.5}) lr {:.3e}", s.step, s.loss, s.matching, s.detection, s.lr);
        let epoch_end = t.step_count() % t.steps_per_epoch() == 0;
        if !epoch_end {
            continue;
        }
        let epoch = s.epoch;
        let last = t.is_done();
        if (epoch + 1) % t.config().eval_every as u64 == 0 || last {
            let (smg, msg) = t.validate(val, features)?;
            let r1 = msg.as_ref().and_then(|m| m.report.recall.get(&1).copied());
            let selected = match t.config().selection {
                Selection::SmgMiou => smg.report.miou,
                Selection::R1 => r1.unwrap_or(0.0),
            };
            let improved = t.offer(selected);
            if improved {
                t.checkpoint().save(&best_path(out))?;
            }
            let rec = EpochLog {
                epoch,
                step: t.step_count(),
                mean_loss: loss_sum / loss_n.max(1) as f64,
                val_miou: smg.report.miou,
                val_r1: r1,
                selected,
                improved,
            };
            log::info!(
                "epoch {} step {} loss {:.4} val mIoU {:.4}{} ({:.1}s)",
                epoch,
                rec.step,
                rec.mean_loss,
                rec.val_miou,
                if improved { " *" } else { "" },
                started.elapsed().as_secs_f64()
            );
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            epochs.push(rec);
            loss_sum = 0.0;
            loss_n = 0;
        }
        t.checkpoint().save(&last_path(out))?;
    }
    t.checkpoint().save(&last_path(out))?;
    log::info!("trained {} steps in {:.1}s", t.step_count(), started.elapsed().as_secs_f64());
    Ok(TrainSummary { steps: t.step_count(), best: t.best(), epochs })
}
