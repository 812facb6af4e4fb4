use rand_chacha::ChaCha8Rng;

use super::{ModelError, PeVariant};
use crate::numcore::nn::Embedding;
use crate::numcore::{Graph, ParamStore, Real, Tensor, Var};

/// `positions × dim` table with sin(pos / 10000^(2i/dim)) in channel 2i and
/// the matching cosine in channel 2i+1.
pub fn sinusoidal_table(positions: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; positions * dim];
    for pos in 0..positions {
        for c in 0..dim {
            let i = c / 2;
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            out[pos * dim + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[derive(Clone, Debug)]
pub enum PositionalEncoding {
    Learned(Embedding),
    Sinusoidal { max_len: usize, dim: usize },
    None { max_len: usize },
}

impl PositionalEncoding {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        variant: PeVariant,
        max_len: usize,
        dim: usize,
    ) -> Self {
        match variant {
            PeVariant::Learned => PositionalEncoding::Learned(Embedding::new(store, rng, name, max_len, dim)),
            PeVariant::Sinusoidal => PositionalEncoding::Sinusoidal { max_len, dim },
            PeVariant::None => PositionalEncoding::None { max_len },
        }
    }

    pub fn max_len(&self) -> usize {
        match self {
            PositionalEncoding::Learned(e) => e.rows,
            PositionalEncoding::Sinusoidal { max_len, .. } | PositionalEncoding::None { max_len } => *max_len,
        }
    }

    /// Adds the encoding of positions `0..rows` to the rows of `x`.
    pub fn apply<S: Real>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var, ModelError> {
        let n = g.value(x).rows();
        if n > self.max_len() {
            return Err(ModelError::Length { n, max: self.max_len() });
        }
        match self {
            PositionalEncoding::Learned(e) => {
                let idx: Vec<usize> = (0..n).collect();
                let pe = e.lookup(g, ps, &idx)?;
                Ok(g.add(x, pe)?)
            }
            PositionalEncoding::Sinusoidal { dim, .. } => {
                let table = sinusoidal_table(n, *dim).into_iter().map(S::of).collect();
                let pe = g.constant(Tensor::new(vec![n, *dim], table)?);
                Ok(g.add(x, pe)?)
            }
            PositionalEncoding::None { .. } => Ok(x),
        }
    }
}
