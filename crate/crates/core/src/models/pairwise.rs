use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, PairwiseScores};
use crate::numcore::nn::{stack_heads, EncoderLayer, LayerNorm, Linear};
use crate::numcore::{Graph, ParamStore, Real, Tensor, Var};

/// Transformer encoder without positions, followed by a four-layer scorer on
/// every difference `encoded_j − encoded_i`.
#[derive(Clone, Debug)]
pub struct PairwiseRank {
    input: Linear,
    encoder: Vec<EncoderLayer>,
    norm: LayerNorm,
    scorer: [Linear; 4],
}

impl PairwiseRank {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
    ) -> Result<Self, ModelError> {
        let h = cfg.hidden_dim;
        let input = Linear::new(store, rng, "input", cfg.input_dim, h, true);
        let encoder = (0..cfg.layers)
            .map(|k| EncoderLayer::new(store, rng, &format!("enc.{k}"), h, cfg.heads, 2 * h))
            .collect::<Result<Vec<_>, _>>()?;
        let norm = LayerNorm::new(store, "enc.norm", h);
        let widths = [h, (h / 2).max(1), (h / 4).max(1), (h / 8).max(1), 1];
        let scorer =
            std::array::from_fn(|k| Linear::new(store, rng, &format!("score.{k}"), widths[k], widths[k + 1], true));
        Ok(Self { input, encoder, norm, scorer })
    }

    /// Contextual page encodings (n×h) and per-layer, per-head attention.
    pub fn encode<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
    ) -> Result<(Var, Vec<Vec<Var>>), ModelError> {
        let mut h = self.input.forward(g, ps, x)?;
        let mut attn = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (out, a) = layer.forward(g, ps, h, None)?;
            h = out;
            attn.push(a);
        }
        Ok((self.norm.forward(g, ps, h)?, attn))
    }

    /// Scores every row difference of `enc` (n×h) into an n×n matrix.
    pub fn score<S: Real>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, enc: Var) -> Result<Var, ModelError> {
        let n = g.value(enc).rows();
        // The first layer is linear, so W(e_j − e_i) + b = We_j − We_i + b and
        // the projection runs on n rows instead of n² rows.
        let first = &self.scorer[0];
        let w = g.param(ps, first.w);
        let proj = g.matmul(enc, w)?;
        let mut z = g.pair_diff(proj)?;
        if let Some(b) = first.b {
            let b = g.param(ps, b);
            z = g.add_row(z, b)?;
        }
        for layer in &self.scorer[1..] {
            z = g.gelu(z);
            z = layer.forward(g, ps, z)?;
        }
        Ok(g.reshape(z, &[n, n])?)
    }

    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
    ) -> Result<(Var, Vec<Vec<Var>>), ModelError> {
        let (enc, attn) = self.encode(g, ps, x)?;
        Ok((self.score(g, ps, enc)?, attn))
    }

    pub fn pairwise_forward(
        &self,
        ps: &ParamStore<f32>,
        pages: &Tensor<f32>,
    ) -> Result<(PairwiseScores, Vec<Tensor<f32>>), ModelError> {
        let mut g = Graph::new();
        let x = g.constant(pages.clone());
        let (s, attn) = self.forward(&mut g, ps, x)?;
        let stacks = attn.iter().map(|a| stack_heads(&g, a)).collect();
        let n = pages.rows();
        let scores = PairwiseScores::new(n, g.value(s).data().iter().map(|&v| v as f64).collect())?;
        Ok((scores, stacks))
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::super::{Arch, Model, Net};
    use super::*;
    use crate::numcore::SeedStream;
    use rand::Rng;

    fn model() -> Model {
        Model::new(tiny(Arch::PairwiseRank, 5)).unwrap()
    }

    fn random_pages(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = SeedStream::new(seed).rng();
        Tensor::new(vec![n, 5], (0..n * 5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes_and_finiteness() {
        let m = model();
        let Net::PairwiseRank(net) = m.net() else { unreachable!() };
        for n in 2..=25 {
            let (s, attn) = net.pairwise_forward(m.params(), &random_pages(n, n as u64)).unwrap();
            assert_eq!(s.n(), n);
            assert!(s.as_slice().iter().all(|x| x.is_finite()));
            assert_eq!(attn[0].dims(), &[2, n, n]);
        }
    }

    #[test]
    fn identical_pages_see_negated_differences() {
        let m = model();
        let Net::PairwiseRank(net) = m.net() else { unreachable!() };
        let mut g = Graph::<f32>::new();
        let row: Vec<f32> = (0..5).map(|k| k as f32 * 0.3 - 0.5).collect();
        let x = g.constant(Tensor::from_rows(&[row.clone(), row.clone(), vec![0.1; 5]]).unwrap());
        let (enc, _) = net.encode(&mut g, m.params(), x).unwrap();
        let d = g.pair_diff(enc).unwrap();
        let v = g.value(d);
        // rows (0,1) and (1,0)
        for (a, b) in v.row(1).iter().zip(v.row(3)) {
            assert_eq!(*a, -*b);
        }
    }
}
