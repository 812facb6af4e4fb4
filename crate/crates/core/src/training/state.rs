use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fit::EpochRecord;
use super::TrainError;
use crate::models::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, Model, Record};
use crate::numcore::{AdamState, ParamStore, Tensor};

/// Everything needed to continue an interrupted run bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub last_params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub best_params: ParamStore<f32>,
    pub best_tau: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    epochs_done: usize,
    best_tau: Option<f64>,
    best_epoch: usize,
    log: Vec<EpochRecord>,
    adam_step: u64,
    adam_lr: f32,
    adam_betas: (f32, f32),
    adam_eps: f32,
}

impl TrainState {
    pub fn fresh(model: &Model, lr: f64) -> Self {
        Self {
            epochs_done: 0,
            last_params: model.params().clone(),
            adam: AdamState::with_lr(model.params(), lr as f32),
            best_params: model.params().clone(),
            best_tau: f64::NEG_INFINITY,
            best_epoch: 0,
            log: Vec::new(),
        }
    }

    pub(super) fn check_compatible(&self, model: &Model) -> Result<(), TrainError> {
        let same = |a: &ParamStore<f32>| {
            a.len() == model.params().len()
                && a.iter().zip(model.params().iter()).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.dims() == t2.dims())
        };
        if !same(&self.last_params) || !same(&self.best_params) || self.adam.first_moment.len() != model.params().len()
        {
            return Err(TrainError::Config("saved training state does not match the model".into()));
        }
        Ok(())
    }
}

fn prefixed<'a>(prefix: &str, ps: &'a ParamStore<f32>) -> impl Iterator<Item = Record> + 'a {
    let prefix = prefix.to_string();
    ps.iter().map(move |(n, t)| Record { name: format!("{prefix}{n}"), tensor: t.clone() })
}

fn moments<'a>(prefix: &'a str, ps: &'a ParamStore<f32>, m: &'a [Vec<f32>]) -> impl Iterator<Item = Record> + 'a {
    ps.iter().zip(m).map(move |((n, _), v)| Record {
        name: format!("{prefix}{n}"),
        tensor: Tensor::new(vec![v.len()], v.clone()).expect("flat moment"),
    })
}

/// Writes the resumable state of `model`'s run as a checkpoint file.
pub fn save_train_state(model: &Model, state: &TrainState, train_seed: u64, path: &Path) -> Result<(), TrainError> {
    let meta = Meta {
        epochs_done: state.epochs_done,
        best_tau: state.best_tau.is_finite().then_some(state.best_tau),
        best_epoch: state.best_epoch,
        log: state.log.clone(),
        adam_step: state.adam.step_count,
        adam_lr: state.adam.learning_rate,
        adam_betas: (state.adam.beta1, state.adam.beta2),
        adam_eps: state.adam.epsilon,
    };
    let records = prefixed("last/", &state.last_params)
        .chain(prefixed("best/", &state.best_params))
        .chain(moments("adam.m/", &state.last_params, &state.adam.first_moment))
        .chain(moments("adam.v/", &state.last_params, &state.adam.second_moment))
        .collect();
    let ck = Checkpoint {
        config: model.config().clone(),
        train_seed,
        meta: serde_json::to_value(meta).map_err(|e| CheckpointError::Format(e.to_string()))?,
        records,
    };
    write_checkpoint(&ck, path)?;
    Ok(())
}

fn strip(records: &[Record], prefix: &str) -> Vec<Record> {
    records
        .iter()
        .filter_map(|r| r.name.strip_prefix(prefix).map(|n| Record { name: n.to_string(), tensor: r.tensor.clone() }))
        .collect()
}

/// Returns the model holding the last-epoch parameters, the state and the training seed.
pub fn load_train_state(path: &Path) -> Result<(Model, TrainState, u64), TrainError> {
    let ck = read_checkpoint(path)?;
    let meta: Meta =
        serde_json::from_value(ck.meta).map_err(|e| CheckpointError::Format(format!("train state: {e}")))?;
    let last = Model::from_records(ck.config.clone(), &strip(&ck.records, "last/"))?;
    let best = Model::from_records(ck.config, &strip(&ck.records, "best/"))?;
    let flat = |prefix: &str| -> Result<Vec<Vec<f32>>, TrainError> {
        let recs = strip(&ck.records, prefix);
        last.params()
            .iter()
            .map(|(name, t)| {
                let r = recs
                    .iter()
                    .find(|r| r.name == name)
                    .ok_or_else(|| CheckpointError::Format(format!("missing moment {prefix}{name}")))?;
                if r.tensor.numel() != t.numel() {
                    return Err(CheckpointError::Format(format!("moment {prefix}{name} has the wrong size")).into());
                }
                Ok(r.tensor.data().to_vec())
            })
            .collect()
    };
    let adam = AdamState {
        step_count: meta.adam_step,
        first_moment: flat("adam.m/")?,
        second_moment: flat("adam.v/")?,
        learning_rate: meta.adam_lr,
        beta1: meta.adam_betas.0,
        beta2: meta.adam_betas.1,
        epsilon: meta.adam_eps,
    };
    let state = TrainState {
        epochs_done: meta.epochs_done,
        last_params: last.params().clone(),
        adam,
        best_params: best.params().clone(),
        best_tau: meta.best_tau.unwrap_or(f64::NEG_INFINITY),
        best_epoch: meta.best_epoch,
        log: meta.log,
    };
    Ok((last, state, ck.train_seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, shuffle_all, split_corpus, CorpusConfig};
    use crate::models::{Arch, ModelConfig};
    use crate::numcore::SeedStream;
    use crate::training::{fit, fit_from, TrainConfig};

    #[test]
    fn resume_through_a_file_matches_an_uninterrupted_run() {
        let docs = generate_corpus(&CorpusConfig { n_docs: 50, dim: 8, chrono_dim: 3, ..Default::default() }).unwrap();
        let s = split_corpus(&docs, (0.7, 0.15, 0.15), SeedStream::new(1)).unwrap();
        let val = shuffle_all(&s.val, SeedStream::new(2));
        let cfg = ModelConfig { layers: 1, hidden_dim: 8, heads: 2, ..ModelConfig::desk(Arch::Seq2Seq, 8, 4) };
        let full = TrainConfig { epochs: 3, batch_size: 8, seed: 6, ..Default::default() };

        let mut whole = Model::new(cfg.clone()).unwrap();
        let r_whole = fit(&mut whole, &s.train, &val, &full).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let mut part = Model::new(cfg).unwrap();
        let (_, state) = fit_from(&mut part, &s.train, &val, &TrainConfig { epochs: 1, ..full.clone() }, None).unwrap();
        save_train_state(&part, &state, full.seed, &path).unwrap();
        let (mut loaded, loaded_state, seed) = load_train_state(&path).unwrap();
        assert_eq!(seed, 6);
        assert_eq!(loaded_state.adam, state.adam);
        assert_eq!(loaded_state.epochs_done, 1);
        let (r_part, _) = fit_from(&mut loaded, &s.train, &val, &full, Some(loaded_state)).unwrap();
        assert_eq!(r_part.val_tau, r_whole.val_tau);
        for ((_, a), (_, b)) in loaded.params().iter().zip(whole.params().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }
}
