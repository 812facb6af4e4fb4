use rand_chacha::ChaCha8Rng;

use super::{greedy_decode, pointer_step_mask, ModelConfig, ModelError, PositionalEncoding, TrainOutput};
use crate::metrics::Ordering;
use crate::numcore::nn::{causal_mask, stack_heads, xavier, DecoderLayer, EncoderLayer, LayerNorm, Linear};
use crate::numcore::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Encoder-decoder transformer with a pointer head over input slots.
///
/// Encoder positions are input slots; decoder positions are output steps.
/// The decoder input at step t is the encoder representation of the page
/// chosen at step t−1, or a learned start vector at step 0.
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    input: Linear,
    enc_pe: PositionalEncoding,
    dec_pe: PositionalEncoding,
    encoder: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    start: ParamId,
    decoder: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    query: Linear,
    key: Linear,
    hidden: usize,
}

impl Seq2Seq {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
    ) -> Result<Self, ModelError> {
        let h = cfg.hidden_dim;
        let ff = 2 * h;
        let input = Linear::new(store, rng, "input", cfg.input_dim, h, true);
        let enc_pe = PositionalEncoding::new(store, rng, "enc.pe", cfg.pe_variant, cfg.max_len, h);
        let dec_pe = PositionalEncoding::new(store, rng, "dec.pe", cfg.pe_variant, cfg.max_len, h);
        let encoder = (0..cfg.layers)
            .map(|k| EncoderLayer::new(store, rng, &format!("enc.{k}"), h, cfg.heads, ff))
            .collect::<Result<Vec<_>, _>>()?;
        let enc_norm = LayerNorm::new(store, "enc.norm", h);
        let start = store.add("dec.start", xavier(rng, 1, h));
        let decoder = (0..cfg.layers)
            .map(|k| DecoderLayer::new(store, rng, &format!("dec.{k}"), h, cfg.heads, ff))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            input,
            enc_pe,
            dec_pe,
            encoder,
            enc_norm,
            start,
            decoder,
            dec_norm: LayerNorm::new(store, "dec.norm", h),
            query: Linear::new(store, rng, "ptr.q", h, h, true),
            key: Linear::new(store, rng, "ptr.k", h, h, true),
            hidden: h,
        })
    }

    /// Encoder memory (n×h) and per-layer, per-head self-attention.
    fn encode<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
    ) -> Result<(Var, Vec<Vec<Var>>), ModelError> {
        let h = self.input.forward(g, ps, x)?;
        let mut h = self.enc_pe.apply(g, ps, h)?;
        let mut attn = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (out, a) = layer.forward(g, ps, h, None)?;
            h = out;
            attn.push(a);
        }
        Ok((self.enc_norm.forward(g, ps, h)?, attn))
    }

    /// Pointer logits (T×n) for T = prev.len() + 1 decoder steps.
    fn step_logits<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        memory: Var,
        keys: Var,
        prev: &[usize],
    ) -> Result<Var, ModelError> {
        let start = g.param(ps, self.start);
        let inputs = if prev.is_empty() {
            start
        } else {
            let rows = g.gather_rows(memory, prev)?;
            g.concat_rows(&[start, rows])?
        };
        let mut h = self.dec_pe.apply(g, ps, inputs)?;
        let causal = causal_mask(prev.len() + 1);
        for layer in &self.decoder {
            h = layer.forward(g, ps, h, memory, &causal)?;
        }
        let h = self.dec_norm.forward(g, ps, h)?;
        let q = self.query.forward(g, ps, h)?;
        let l = g.matmul_nt(q, keys)?;
        Ok(g.scale(l, S::of(1.0 / (self.hidden as f64).sqrt())))
    }

    pub fn teacher_forced<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
        order: &[usize],
    ) -> Result<TrainOutput, ModelError> {
        let steps = order.len() - 1;
        let (memory, _) = self.encode(g, ps, x)?;
        let keys = self.key.forward(g, ps, memory)?;
        let logits = self.step_logits(g, ps, memory, keys, &order[..steps - 1])?;
        Ok(TrainOutput::Pointer { logits, mask: pointer_step_mask(order, steps), targets: order[..steps].to_vec() })
    }

    /// Greedy decode with used slots masked, plus encoder attention stacks.
    pub fn decode(
        &self,
        ps: &ParamStore<f32>,
        pages: &Tensor<f32>,
    ) -> Result<(Ordering, Vec<Tensor<f32>>), ModelError> {
        let mut g = Graph::new();
        let x = g.constant(pages.clone());
        let (memory, attn) = self.encode(&mut g, ps, x)?;
        let keys = self.key.forward(&mut g, ps, memory)?;
        let stacks = attn.iter().map(|a| stack_heads(&g, a)).collect();
        let n = pages.rows();
        let ordering = greedy_decode(n, |chosen| {
            let l = self.step_logits(&mut g, ps, memory, keys, chosen)?;
            Ok(g.value(l).row(chosen.len()).to_vec())
        })?;
        Ok((ordering, stacks))
    }

    /// Teacher-forced step logits for a given order, as plain values.
    pub fn forced_logits(
        &self,
        ps: &ParamStore<f32>,
        pages: &Tensor<f32>,
        order: &[usize],
    ) -> Result<Tensor<f32>, ModelError> {
        let mut g = Graph::new();
        let x = g.constant(pages.clone());
        let (memory, _) = self.encode(&mut g, ps, x)?;
        let keys = self.key.forward(&mut g, ps, memory)?;
        let l = self.step_logits(&mut g, ps, memory, keys, &order[..order.len() - 1])?;
        Ok(g.value(l).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny;
    use super::super::{Arch, Model, Net, PeVariant};
    use super::*;
    use crate::numcore::SeedStream;
    use rand::Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..n {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn without_positions_logits_are_slot_equivariant() {
        let cfg = ModelConfig { pe_variant: PeVariant::None, ..tiny(Arch::Seq2Seq, 6) };
        let model = Model::new(cfg).unwrap();
        let Net::Seq2Seq(net) = model.net() else { unreachable!() };
        let mut rng = SeedStream::new(4).rng();
        let pages = Tensor::new(vec![4, 6], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let order = [2, 0, 3, 1];
        let base = net.forced_logits(model.params(), &pages, &order).unwrap();
        for perm in permutations(4) {
            // Page in slot s moves to slot perm[s].
            let mut rows = vec![vec![0f32; 6]; 4];
            for s in 0..4 {
                rows[perm[s]] = pages.row(s).to_vec();
            }
            let moved = Tensor::from_rows(&rows).unwrap();
            let moved_order: Vec<usize> = order.iter().map(|&s| perm[s]).collect();
            let got = net.forced_logits(model.params(), &moved, &moved_order).unwrap();
            for t in 0..3 {
                for s in 0..4 {
                    assert!((base.at(t, s) - got.at(t, perm[s])).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn over_long_input_is_a_length_error() {
        let model = Model::new(tiny(Arch::Seq2Seq, 3)).unwrap();
        let Net::Seq2Seq(net) = model.net() else { unreachable!() };
        let pages = Tensor::zeros(&[26, 3]);
        assert!(matches!(net.decode(model.params(), &pages), Err(ModelError::Length { n: 26, .. })));
    }
}
