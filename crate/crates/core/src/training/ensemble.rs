use rayon::prelude::*;

use super::fit::{fit, FitResult};
use super::{Strategy, TrainConfig, TrainError};
use crate::corpus::{bucket_of, Document, LengthBucket, ShuffledInstance};
use crate::metrics::Ordering;
use crate::models::{Model, ModelConfig};
use crate::numcore::SeedStream;

/// One model per length bucket, indexed in bucket order.
#[derive(Clone, Debug)]
pub struct SpecialistEnsemble {
    models: Vec<Model>,
}

impl SpecialistEnsemble {
    pub fn new(models: Vec<Model>) -> Result<Self, TrainError> {
        if models.len() != LengthBucket::ALL.len() {
            return Err(TrainError::Config(format!("an ensemble needs 5 specialists, got {}", models.len())));
        }
        Ok(Self { models })
    }

    pub fn get(&self, bucket: LengthBucket) -> &Model {
        &self.models[bucket.index()]
    }

    pub fn models(&self) -> &[Model] {
        &self.models
    }

    pub fn num_params(&self) -> usize {
        self.models.iter().map(Model::num_params).sum()
    }

    pub fn order(&self, inst: &ShuffledInstance) -> Result<Ordering, TrainError> {
        Ok(route(self, inst.len())?.order(inst)?)
    }
}

/// The specialist responsible for an `n`-page document.
pub fn route(ensemble: &SpecialistEnsemble, n: usize) -> Result<&Model, TrainError> {
    let b = bucket_of(n).map_err(|_| TrainError::Domain(format!("no specialist covers {n} pages")))?;
    Ok(ensemble.get(b))
}

/// Trains the five specialists independently (in parallel when threads are
/// available). `scale` sizes each one with [`ModelConfig::scaled_for`];
/// otherwise all share `base`. Every specialist gets its own derived seed.
pub fn train_ensemble(
    base: &ModelConfig,
    scale: bool,
    strategy: Strategy,
    train: &[Document],
    val: &[ShuffledInstance],
    tcfg: &TrainConfig,
) -> Result<(SpecialistEnsemble, Vec<FitResult>), TrainError> {
    if strategy == Strategy::Universal {
        return Err(TrainError::Config("an ensemble needs a specialized strategy".into()));
    }
    let runs = LengthBucket::ALL
        .par_iter()
        .map(|&b| {
            let label = b.label();
            let mcfg = if scale { base.scaled_for(b) } else { base.clone() };
            let mcfg = ModelConfig { seed: SeedStream::new(base.seed).split(&label).seed(), ..mcfg };
            let cfg = TrainConfig {
                strategy,
                target_bucket: Some(b),
                seed: SeedStream::new(tcfg.seed).split(&label).seed(),
                ..tcfg.clone()
            };
            let mut model = Model::new(mcfg).map_err(TrainError::from)?;
            let r = fit(&mut model, train, val, &cfg)?;
            Ok::<_, TrainError>((model, r))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (models, results) = runs.into_iter().unzip();
    Ok((SpecialistEnsemble::new(models)?, results))
}

impl From<crate::corpus::CorpusError> for TrainError {
    fn from(e: crate::corpus::CorpusError) -> Self {
        TrainError::Domain(e.to_string())
    }
}
