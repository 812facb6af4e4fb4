use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::curriculum::{curriculum_schedule_with, stage_at, CurriculumStage};
use super::losses::loss_for;
use super::state::TrainState;
use super::{specialization_weight, Strategy, TrainConfig, TrainError};
use crate::corpus::{shuffle_instance, Document, LengthBucket, ShuffledInstance};
use crate::metrics::{mean_tau, Ordering, TauSummary};
use crate::models::Model;
use crate::numcore::{adam_step, Graph, NumError, SeedStream};
use crate::util::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Active length range, e.g. `2-5`, or `all`.
    pub stage: String,
    pub train_loss: f64,
    pub val_tau: f64,
    pub val_per_bucket: [Option<f64>; 5],
}

/// Page counts of the documents in one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchAudit {
    pub epoch: usize,
    pub stage: Option<CurriculumStage>,
    pub lengths: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub val_tau: Vec<f64>,
    pub log: Vec<EpochRecord>,
    pub audit: Vec<BatchAudit>,
    /// 0-based epoch whose parameters the model now holds.
    pub best_epoch: usize,
    pub best_tau: f64,
}

/// Orders every instance (in parallel; results keep input order) and scores them.
pub fn evaluate(model: &Model, instances: &[ShuffledInstance]) -> Result<(TauSummary, Vec<Ordering>), TrainError> {
    let preds = instances.par_iter().map(|inst| model.order(inst)).collect::<Result<Vec<_>, _>>()?;
    Ok((mean_tau(instances, &preds)?, preds))
}

/// Trains from scratch; see [`fit_from`].
pub fn fit(
    model: &mut Model,
    train: &[Document],
    val: &[ShuffledInstance],
    cfg: &TrainConfig,
) -> Result<FitResult, TrainError> {
    fit_from(model, train, val, cfg, None).map(|(r, _)| r)
}

/// Same-length batches in seeded random order.
fn make_batches(docs: &[&Document], batch_size: usize, seed: SeedStream) -> Vec<Vec<usize>> {
    let mut rng = seed.rng();
    let mut idx: Vec<usize> = (0..docs.len()).collect();
    idx.shuffle(&mut rng);
    idx.sort_by_key(|&i| docs[i].len());
    let mut batches = Vec::new();
    let mut start = 0;
    while start < idx.len() {
        let len = docs[idx[start]].len();
        let mut end = start;
        while end < idx.len() && docs[idx[end]].len() == len && end - start < batch_size {
            end += 1;
        }
        batches.push(idx[start..end].to_vec());
        start = end;
    }
    batches.shuffle(&mut rng);
    batches
}

/// Seeded, deterministic training with per-epoch validation. The model ends
/// up holding the parameters of the best validation epoch. Passing the state
/// returned by an earlier call continues that run up to `cfg.epochs`.
pub fn fit_from(
    model: &mut Model,
    train: &[Document],
    val: &[ShuffledInstance],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<(FitResult, TrainState), TrainError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("training and validation sets must be non-empty".into()));
    }
    let stages = match (cfg.strategy, cfg.target_bucket) {
        (Strategy::SpecializedCurriculum, Some(b)) => {
            Some(curriculum_schedule_with(b, cfg.epochs, cfg.lr_final_stage / cfg.lr)?)
        }
        _ => None,
    };
    let mut state = match resume {
        Some(s) => {
            s.check_compatible(model)?;
            *model.params_mut() = s.last_params.clone();
            s
        }
        None => TrainState::fresh(model, cfg.lr),
    };
    let root = SeedStream::new(cfg.seed);
    let mut audit = Vec::new();

    for epoch in state.epochs_done..cfg.epochs {
        let stage = stages.as_ref().map(|s| s[stage_at(s, epoch)]);
        let lr = cfg.lr * stage.map_or(1.0, |s| s.lr_scale);
        state.adam.learning_rate = lr as f32;
        let eligible: Vec<&Document> = train.iter().filter(|d| stage.is_none_or(|s| s.contains(d.len()))).collect();
        if eligible.is_empty() {
            log::warn!("epoch {epoch}: no training documents in the active length range");
        }
        let epoch_seed = root.split("epoch").split_index(epoch as u64);
        let weight = |len: usize| match (cfg.strategy, cfg.target_bucket) {
            (Strategy::SpecializedDirect, Some(b)) => specialization_weight(len, b, cfg.weight_factor),
            _ => 1.0,
        };

        let (mut loss_sum, mut weight_sum) = (0.0f64, 0.0f64);
        for batch in make_batches(&eligible, cfg.batch_size, epoch_seed.split("batches")) {
            let total: f64 = batch.iter().map(|&i| weight(eligible[i].len())).sum();
            model.params_mut().zero_grads();
            for &i in &batch {
                let doc = eligible[i];
                let inst = shuffle_instance(doc, epoch_seed.split(&doc.doc_id));
                let w = weight(doc.len());
                let mut g = Graph::<f32>::new();
                let x = g.constant(inst.page_matrix());
                let out = model.net().teacher_forced(&mut g, model.params(), x, inst.truth_rank())?;
                let loss = loss_for(&mut g, out, inst.truth_rank())?;
                let value = g.scalar(loss) as f64;
                if !value.is_finite() {
                    return Err(TrainError::Diverged { epoch, reason: format!("non-finite loss on {}", doc.doc_id) });
                }
                loss_sum += w * value;
                weight_sum += w;
                let grads = g.backward(loss)?;
                model.params_mut().accumulate(&grads, (w / total) as f32);
            }
            model.params_mut().clip_grad_norm(cfg.clip_norm as f32);
            adam_step(model.params_mut(), &mut state.adam).map_err(|e| match e {
                NumError::Diverged(reason) => TrainError::Diverged { epoch, reason },
                other => TrainError::Num(other),
            })?;
            audit.push(BatchAudit { epoch, stage, lengths: batch.iter().map(|&i| eligible[i].len()).collect() });
        }

        let (summary, _) = evaluate(model, val)?;
        let record = EpochRecord {
            epoch,
            stage: stage.map_or_else(|| "all".to_string(), |s| s.label()),
            train_loss: if weight_sum > 0.0 { loss_sum / weight_sum } else { f64::NAN },
            val_tau: summary.overall,
            val_per_bucket: LengthBucket::ALL.map(|b| summary.bucket(b)),
        };
        log::info!("epoch {epoch}: loss {:.4} val tau {:.4}", record.train_loss, record.val_tau);
        if summary.overall > state.best_tau {
            state.best_tau = summary.overall;
            state.best_epoch = epoch;
            state.best_params = model.params().clone();
        }
        state.log.push(record);
        state.epochs_done = epoch + 1;
    }

    state.last_params = model.params().clone();
    *model.params_mut() = state.best_params.clone();
    let result = FitResult {
        val_tau: state.log.iter().map(|r| r.val_tau).collect(),
        log: state.log.clone(),
        audit,
        best_epoch: state.best_epoch,
        best_tau: state.best_tau,
    };
    Ok((result, state))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// Epoch log as CSV: epoch, stage, train loss, validation τ overall and per bucket.
pub fn epoch_log_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,stage,train_loss,val_tau");
    for b in LengthBucket::ALL {
        let _ = write!(s, ",val_tau_{}", b.label());
    }
    s.push('\n');
    for r in log {
        let _ = write!(s, "{},{},{},{}", r.epoch, r.stage, r.train_loss, r.val_tau);
        for v in r.val_per_bucket {
            let _ = write!(s, ",{}", fmt_opt(v));
        }
        s.push('\n');
    }
    s
}

/// Inverse of the CSV written by [`write_epoch_log`].
pub fn parse_epoch_log(text: &str) -> Result<Vec<EpochRecord>, TrainError> {
    let mut lines = text.lines();
    let header = epoch_log_csv(&[]);
    if lines.next() != Some(header.trim_end()) {
        return Err(TrainError::Domain("epoch log has an unexpected header".into()));
    }
    let bad = |k: usize| TrainError::Domain(format!("epoch log line {} is malformed", k + 2));
    lines
        .enumerate()
        .map(|(k, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(k));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(k));
            let mut val_per_bucket = [None; 5];
            for (slot, s) in val_per_bucket.iter_mut().zip(&f[4..]) {
                *slot = if s.is_empty() { None } else { Some(num(s)?) };
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad(k))?,
                stage: f[1].to_string(),
                train_loss: num(f[2])?,
                val_tau: num(f[3])?,
                val_per_bucket,
            })
        })
        .collect()
}

pub fn write_epoch_log(log: &[EpochRecord], path: &Path) -> Result<(), TrainError> {
    write_atomic(path, epoch_log_csv(log).as_bytes())?;
    Ok(())
}
