use rand_chacha::ChaCha8Rng;

use super::{greedy_decode, pointer_step_mask, ModelConfig, ModelError, TrainOutput};
use crate::metrics::Ordering;
use crate::numcore::nn::{BiLstm, Linear, LstmCell, LstmState};
use crate::numcore::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Feed-forward pointer network. The decoder state after each selection
/// depends only on the page just selected.
#[derive(Clone, Debug)]
pub struct PointerMlp {
    encoder: Vec<Linear>,
    init: Linear,
    next: Linear,
    hidden: usize,
}

impl PointerMlp {
    pub fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let h = cfg.hidden_dim;
        let encoder = (0..cfg.layers)
            .map(|k| {
                let input = if k == 0 { cfg.input_dim } else { h };
                Linear::new(store, rng, &format!("enc.{k}"), input, h, true)
            })
            .collect();
        Self {
            encoder,
            init: Linear::new(store, rng, "dec.init", h, h, true),
            next: Linear::new(store, rng, "dec.next", h, h, true),
            hidden: h,
        }
    }

    fn encode<S: Real>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var, ModelError> {
        let mut h = x;
        for (k, layer) in self.encoder.iter().enumerate() {
            h = layer.forward(g, ps, h)?;
            if k + 1 < self.encoder.len() {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }

    fn initial_state<S: Real>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, enc: Var) -> Result<Var, ModelError> {
        let mean = g.mean_rows(enc)?;
        let s = self.init.forward(g, ps, mean)?;
        Ok(g.tanh(s))
    }

    /// States for rows of `selected` (k×h encodings) → k×h.
    fn next_states<S: Real>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, selected: Var) -> Result<Var, ModelError> {
        let s = self.next.forward(g, ps, selected)?;
        Ok(g.tanh(s))
    }

    fn logits<S: Real>(&self, g: &mut Graph<S>, states: Var, enc: Var) -> Result<Var, ModelError> {
        let l = g.matmul_nt(states, enc)?;
        Ok(g.scale(l, S::of(1.0 / (self.hidden as f64).sqrt())))
    }

    pub fn teacher_forced<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
        order: &[usize],
    ) -> Result<TrainOutput, ModelError> {
        let n = order.len();
        let steps = n - 1;
        let enc = self.encode(g, ps, x)?;
        let s0 = self.initial_state(g, ps, enc)?;
        let states = if steps > 1 {
            let prev = g.gather_rows(enc, &order[..steps - 1])?;
            let rest = self.next_states(g, ps, prev)?;
            g.concat_rows(&[s0, rest])?
        } else {
            s0
        };
        let logits = self.logits(g, states, enc)?;
        Ok(TrainOutput::Pointer { logits, mask: pointer_step_mask(order, steps), targets: order[..steps].to_vec() })
    }

    pub fn decode(&self, ps: &ParamStore<f32>, pages: &Tensor<f32>) -> Result<Ordering, ModelError> {
        let mut g = Graph::new();
        let x = g.constant(pages.clone());
        let enc = self.encode(&mut g, ps, x)?;
        let mut state = self.initial_state(&mut g, ps, enc)?;
        greedy_decode(pages.rows(), |chosen| {
            if let Some(&last) = chosen.last() {
                let sel = g.gather_rows(enc, &[last])?;
                state = self.next_states(&mut g, ps, sel)?;
            }
            let l = self.logits(&mut g, state, enc)?;
            Ok(g.value(l).data().to_vec())
        })
    }
}

/// Bidirectional LSTM encoder, LSTM decoder fed the previously selected
/// page's encoding, and additive attention over the pages.
#[derive(Clone, Debug)]
pub struct PointerLstm {
    encoder: BiLstm,
    decoder: LstmCell,
    start: ParamId,
    att_enc: Linear,
    att_dec: Linear,
    att_v: Linear,
}

impl PointerLstm {
    pub fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let h = cfg.hidden_dim;
        let enc_dim = 2 * h;
        let encoder = BiLstm::new(store, rng, "enc", cfg.input_dim, h);
        let decoder = LstmCell::new(store, rng, "dec", enc_dim, enc_dim);
        let start = store.add("dec.start", crate::numcore::nn::xavier(rng, 1, enc_dim));
        Self {
            encoder,
            decoder,
            start,
            att_enc: Linear::new(store, rng, "att.enc", enc_dim, enc_dim, false),
            att_dec: Linear::new(store, rng, "att.dec", enc_dim, enc_dim, true),
            att_v: Linear::new(store, rng, "att.v", enc_dim, 1, false),
        }
    }

    /// 1×n attention logits for one decoder hidden state.
    fn step_logits<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        enc_proj: Var,
        h: Var,
    ) -> Result<Var, ModelError> {
        let n = g.value(enc_proj).rows();
        let d = self.att_dec.forward(g, ps, h)?;
        let z = g.add_row(enc_proj, d)?;
        let z = g.tanh(z);
        let u = self.att_v.forward(g, ps, z)?;
        Ok(g.reshape(u, &[1, n])?)
    }

    fn step<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        input: Var,
        state: LstmState,
    ) -> Result<LstmState, ModelError> {
        Ok(self.decoder.step(g, ps, input, state)?)
    }

    pub fn teacher_forced<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
        order: &[usize],
    ) -> Result<TrainOutput, ModelError> {
        let n = order.len();
        let steps = n - 1;
        let enc = self.encoder.encode(g, ps, x)?;
        let enc_proj = self.att_enc.forward(g, ps, enc)?;
        let mut state = self.decoder.zero_state(g);
        let mut input = g.param(ps, self.start);
        let mut rows = Vec::with_capacity(steps);
        for t in 0..steps {
            state = self.step(g, ps, input, state)?;
            rows.push(self.step_logits(g, ps, enc_proj, state.0)?);
            input = g.gather_rows(enc, &[order[t]])?;
        }
        let logits = g.concat_rows(&rows)?;
        Ok(TrainOutput::Pointer { logits, mask: pointer_step_mask(order, steps), targets: order[..steps].to_vec() })
    }

    pub fn decode(&self, ps: &ParamStore<f32>, pages: &Tensor<f32>) -> Result<Ordering, ModelError> {
        let mut g = Graph::new();
        let x = g.constant(pages.clone());
        let enc = self.encoder.encode(&mut g, ps, x)?;
        let enc_proj = self.att_enc.forward(&mut g, ps, enc)?;
        let mut state = self.decoder.zero_state(&mut g);
        greedy_decode(pages.rows(), |chosen| {
            let input = match chosen.last() {
                Some(&last) => g.gather_rows(enc, &[last])?,
                None => g.param(ps, self.start),
            };
            state = self.step(&mut g, ps, input, state)?;
            let l = self.step_logits(&mut g, ps, enc_proj, state.0)?;
            Ok(g.value(l).data().to_vec())
        })
    }
}
