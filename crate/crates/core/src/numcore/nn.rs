//! Layers built on the tape: dense, layer norm, embedding lookup, LSTM,
//! multi-head attention and pre-norm transformer blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumError, ParamId, ParamStore, Real, Tensor, Var};

/// Glorot-uniform matrix drawn in f64 then cast, so f32 and f64 models built
/// from the same stream hold the same numbers.
pub fn xavier<S: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<S> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| S::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

pub fn filled<S: Real>(dims: &[usize], v: f64) -> Tensor<S> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), vec![S::of(v); n]).expect("positive dims")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, in_dim, out_dim));
        let b = bias.then(|| store.add(format!("{name}.b"), filled(&[1, out_dim], 0.0)));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var, NumError> {
        let w = g.param(ps, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(ps, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), filled(&[1, dim], 1.0));
        let bias = store.add(format!("{name}.bias"), filled(&[1, dim], 0.0));
        Self { gain, bias }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var, NumError> {
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        g.layer_norm(x, gain, bias, S::of(Self::EPS))
    }
}

/// Lookup table of trainable row vectors.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: &str, rows: usize, dim: usize) -> Self {
        let data = (0..rows * dim).map(|_| S::of(rng.random_range(-0.1..0.1))).collect();
        let table = store.add(format!("{name}.table"), Tensor::new(vec![rows, dim], data).expect("positive dims"));
        Self { table, rows, dim }
    }

    pub fn lookup<S: Real>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, idx: &[usize]) -> Result<Var, NumError> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.rows) {
            return Err(NumError::Shape(format!("index {bad} outside table of {} rows", self.rows)));
        }
        let t = g.param(ps, self.table);
        g.gather_rows(t, idx)
    }
}

/// Two dense layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden, true),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim, true),
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Result<Var, NumError> {
        let h = self.up.forward(g, ps, x)?;
        let h = g.gelu(h);
        self.down.forward(g, ps, h)
    }
}

/// Standard LSTM cell with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

pub type LstmState = (Var, Var);

impl LstmCell {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Self {
        let w_ih = store.add(format!("{name}.w_ih"), xavier(rng, input_dim, 4 * hidden));
        let w_hh = store.add(format!("{name}.w_hh"), xavier(rng, hidden, 4 * hidden));
        let mut bias = vec![S::zero(); 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|x| *x = S::one());
        let b = store.add(format!("{name}.b"), Tensor::new(vec![1, 4 * hidden], bias).expect("positive dims"));
        Self { w_ih, w_hh, b, input_dim, hidden }
    }

    pub fn zero_state<S: Real>(&self, g: &mut Graph<S>) -> LstmState {
        let h = g.constant(Tensor::zeros(&[1, self.hidden]));
        let c = g.constant(Tensor::zeros(&[1, self.hidden]));
        (h, c)
    }

    /// One recurrence step on a 1×input row.
    pub fn step<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
        state: LstmState,
    ) -> Result<LstmState, NumError> {
        let w_ih = g.param(ps, self.w_ih);
        let xp = g.matmul(x, w_ih)?;
        let b = g.param(ps, self.b);
        let xp = g.add_row(xp, b)?;
        self.step_projected(g, ps, xp, state)
    }

    /// Step where `x·W_ih + b` has already been computed (1×4h).
    pub fn step_projected<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x_proj: Var,
        (h, c): LstmState,
    ) -> Result<LstmState, NumError> {
        let hd = self.hidden;
        if g.dims(h).last() != Some(&hd) || g.dims(c).last() != Some(&hd) {
            return Err(NumError::Shape(format!("LSTM state width must be {hd}")));
        }
        let w_hh = g.param(ps, self.w_hh);
        let hp = g.matmul(h, w_hh)?;
        let z = g.add(x_proj, hp)?;
        let i = g.slice_cols(z, 0, hd)?;
        let f = g.slice_cols(z, hd, hd)?;
        let u = g.slice_cols(z, 2 * hd, hd)?;
        let o = g.slice_cols(z, 3 * hd, hd)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let u = g.tanh(u);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c)?;
        let iu = g.mul(i, u)?;
        let c2 = g.add(fc, iu)?;
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc)?;
        Ok((h2, c2))
    }

    /// Runs over all rows of `seq` (n×input), optionally back to front.
    /// Returns the hidden state for each position in input order.
    pub fn run<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        seq: Var,
        reverse: bool,
    ) -> Result<Vec<Var>, NumError> {
        let n = g.value(seq).rows();
        let w_ih = g.param(ps, self.w_ih);
        let proj = g.matmul(seq, w_ih)?;
        let b = g.param(ps, self.b);
        let proj = g.add_row(proj, b)?;
        let mut state = self.zero_state(g);
        let mut out = vec![state.0; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let xt = g.slice_rows(proj, t, 1)?;
            state = self.step_projected(g, ps, xt, state)?;
            out[t] = state.0;
        }
        Ok(out)
    }
}

/// Bidirectional LSTM: row t of the output is `[forward_t, backward_t]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

impl BiLstm {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            fwd: LstmCell::new(store, rng, &format!("{name}.fwd"), input_dim, hidden),
            bwd: LstmCell::new(store, rng, &format!("{name}.bwd"), input_dim, hidden),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn encode<S: Real>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, seq: Var) -> Result<Var, NumError> {
        let f = self.fwd.run(g, ps, seq, false)?;
        let b = self.bwd.run(g, ps, seq, true)?;
        let f = g.concat_rows(&f)?;
        let b = g.concat_rows(&b)?;
        g.concat_cols(&[f, b])
    }
}

/// Scaled dot-product attention on already-projected `q`, `k`, `v` (n×d each,
/// `k`/`v` may have a different row count). Returns the merged output and the
/// per-head attention matrices.
pub fn multi_head_attention<S: Real>(
    g: &mut Graph<S>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>), NumError> {
    let d = g.value(q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(NumError::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    if g.value(k).cols() != d || g.value(v).cols() != d || g.value(k).rows() != g.value(v).rows() {
        return Err(NumError::Shape("attention q/k/v widths or k/v lengths differ".into()));
    }
    let dh = d / heads;
    let scale = S::of(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let p = g.softmax(scores, mask)?;
        outs.push(g.matmul(p, vh)?);
        attn.push(p);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((out, attn))
}

/// Collects per-head attention matrices into one heads×n×m tensor.
pub fn stack_heads<S: Real>(g: &Graph<S>, heads: &[Var]) -> Tensor<S> {
    let (n, m) = (g.value(heads[0]).rows(), g.value(heads[0]).cols());
    let mut data = Vec::with_capacity(heads.len() * n * m);
    for &h in heads {
        data.extend_from_slice(g.value(h).data());
    }
    Tensor::new(vec![heads.len(), n, m], data).expect("consistent head shapes")
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self, NumError> {
        if heads == 0 || dim % heads != 0 {
            return Err(NumError::Config(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            wq: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true),
            wk: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true),
            wv: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true),
            wo: Linear::new(store, rng, &format!("{name}.o"), dim, dim, true),
            heads,
        })
    }

    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x_q: Var,
        x_kv: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>), NumError> {
        let q = self.wq.forward(g, ps, x_q)?;
        let k = self.wk.forward(g, ps, x_kv)?;
        let v = self.wv.forward(g, ps, x_kv)?;
        let (o, attn) = multi_head_attention(g, q, k, v, self.heads, mask)?;
        Ok((self.wo.forward(g, ps, o)?, attn))
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Result<Self, NumError> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), dim, ff_dim),
        })
    }

    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>), NumError> {
        let h = self.ln_attn.forward(g, ps, x)?;
        let (a, attn) = self.attn.forward(g, ps, h, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln_ff.forward(g, ps, x)?;
        let f = self.ff.forward(g, ps, h)?;
        Ok((g.add(x, f)?, attn))
    }
}

/// Pre-norm transformer decoder block: causal self-attention, cross-attention, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
    ) -> Result<Self, NumError> {
        Ok(Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self"), dim, heads)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), dim),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross"), dim, heads)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), dim),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), dim, ff_dim),
        })
    }

    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
        memory: Var,
        causal: &[bool],
    ) -> Result<Var, NumError> {
        let h = self.ln_self.forward(g, ps, x)?;
        let (a, _) = self.self_attn.forward(g, ps, h, h, Some(causal))?;
        let x = g.add(x, a)?;
        let h = self.ln_cross.forward(g, ps, x)?;
        let (a, _) = self.cross_attn.forward(g, ps, h, memory, None)?;
        let x = g.add(x, a)?;
        let h = self.ln_ff.forward(g, ps, x)?;
        let f = self.ff.forward(g, ps, h)?;
        g.add(x, f)
    }
}

/// Lower-triangular keep-mask for `t` decoder positions.
pub fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|k| k % t <= k / t).collect()
}
