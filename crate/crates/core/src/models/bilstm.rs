use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::numcore::nn::{BiLstm, Linear};
use crate::numcore::{Graph, ParamStore, Real, Var};

/// Stacked bidirectional LSTM with a scalar position head per page.
#[derive(Clone, Debug)]
pub struct BilstmPos {
    layers: Vec<BiLstm>,
    head: Linear,
}

impl BilstmPos {
    pub fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let h = cfg.hidden_dim;
        let layers = (0..cfg.layers)
            .map(|k| {
                let input = if k == 0 { cfg.input_dim } else { 2 * h };
                BiLstm::new(store, rng, &format!("bilstm.{k}"), input, h)
            })
            .collect();
        let head = Linear::new(store, rng, "head", 2 * h, 1, true);
        Self { layers, head }
    }

    /// n×1 scores, one per slot; lower means earlier.
    pub fn forward<S: Real>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var, ModelError> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.encode(g, ps, h)?;
        }
        Ok(self.head.forward(g, ps, h)?)
    }
}
