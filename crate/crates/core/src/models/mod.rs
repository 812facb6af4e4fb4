//! Neural page orderers.
//!
//! Every architecture maps an n×d page matrix (pages in shuffled slot order)
//! to an [`Ordering`]. Training goes through [`Net::teacher_forced`], which
//! returns the raw outputs that the losses in `training` consume.

mod bilstm;
mod checkpoint;
mod encoding;
mod pairwise;
mod pointer;
mod seq2seq;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LengthBucket, ShuffledInstance, MAX_PAGES};
use crate::metrics::Ordering;
use crate::numcore::{Graph, NumError, ParamStore, Real, SeedStream, Tensor, Var};

pub use bilstm::BilstmPos;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_as, read_checkpoint, save_checkpoint,
    write_checkpoint, Checkpoint, CheckpointError, Record, CHECKPOINT_VERSION,
};
pub use encoding::{sinusoidal_table, PositionalEncoding};
pub use pairwise::PairwiseRank;
pub use pointer::{PointerLstm, PointerMlp};
pub use seq2seq::Seq2Seq;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("document has {n} pages but the model supports at most {max}")]
    Length { n: usize, max: usize },
    #[error("need at least two pages, got {0}")]
    TooShort(usize),
    #[error("input has width {got}, model expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arch {
    BilstmPos,
    PointerMlp,
    PointerLstm,
    Seq2Seq,
    PairwiseRank,
}

impl Arch {
    pub const ALL: [Arch; 5] =
        [Arch::BilstmPos, Arch::PointerMlp, Arch::PointerLstm, Arch::Seq2Seq, Arch::PairwiseRank];

    pub fn parse(s: &str) -> Option<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "bilstmpos" | "bilstm" => Some(Arch::BilstmPos),
            "pointermlp" => Some(Arch::PointerMlp),
            "pointerlstm" => Some(Arch::PointerLstm),
            "seq2seq" => Some(Arch::Seq2Seq),
            "pairwiserank" | "pairwise" => Some(Arch::PairwiseRank),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PeVariant {
    #[default]
    Learned,
    Sinusoidal,
    None,
}

impl PeVariant {
    pub const ALL: [PeVariant; 3] = [PeVariant::Learned, PeVariant::Sinusoidal, PeVariant::None];

    pub fn label(self) -> &'static str {
        match self {
            PeVariant::Learned => "learned",
            PeVariant::Sinusoidal => "sinusoidal",
            PeVariant::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Only read by `Seq2Seq`.
    #[serde(default)]
    pub pe_variant: PeVariant,
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub input_dim: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Sort aggregated pairwise scores high-to-low instead of low-to-high.
    #[serde(default)]
    pub descending_scores: bool,
}

impl ModelConfig {
    /// Small default sizes that train on a single CPU core.
    pub fn desk(arch: Arch, input_dim: usize, seed: u64) -> Self {
        let (layers, hidden_dim, heads) = match arch {
            Arch::BilstmPos => (2, 128, 1),
            Arch::PointerMlp => (3, 128, 1),
            Arch::PointerLstm => (1, 128, 1),
            Arch::Seq2Seq => (2, 128, 4),
            Arch::PairwiseRank => (2, 128, 4),
        };
        Self {
            arch,
            pe_variant: PeVariant::Learned,
            layers,
            hidden_dim,
            heads,
            input_dim,
            max_len: MAX_PAGES,
            seed,
            descending_scores: false,
        }
    }

    /// Six encoder and six decoder layers at width 512.
    pub fn full_seq2seq(input_dim: usize, pe_variant: PeVariant, seed: u64) -> Self {
        Self { pe_variant, layers: 6, hidden_dim: 512, heads: 8, ..Self::desk(Arch::Seq2Seq, input_dim, seed) }
    }

    /// Specialist sized for `bucket`, keeping the depth and width ratios of
    /// the reference ensemble (6/8/10/12/12 layers, 1024/1536/2048/2048/3072
    /// width) relative to `self`, which plays the 2-5 page model.
    pub fn scaled_for(&self, bucket: LengthBucket) -> Self {
        const DEPTH: [f64; 5] = [6.0, 8.0, 10.0, 12.0, 12.0];
        const WIDTH: [f64; 5] = [1024.0, 1536.0, 2048.0, 2048.0, 3072.0];
        let k = bucket.index();
        let layers = ((self.layers as f64 * DEPTH[k] / DEPTH[0]).round() as usize).max(1);
        let quantum = (8 * self.heads.max(1)) as f64;
        let width = self.hidden_dim as f64 * WIDTH[k] / WIDTH[0];
        let hidden_dim = (((width / quantum).round()).max(1.0) * quantum) as usize;
        let hidden_dim = if k == 0 { self.hidden_dim } else { hidden_dim };
        Self { layers, hidden_dim, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.hidden_dim == 0 || self.input_dim == 0 {
            return bad("layers, hidden_dim and input_dim must be positive".into());
        }
        if self.max_len < MAX_PAGES {
            return bad(format!("max_len {} must cover {MAX_PAGES} positions", self.max_len));
        }
        if matches!(self.arch, Arch::Seq2Seq | Arch::PairwiseRank)
            && (self.heads == 0 || self.hidden_dim % self.heads != 0)
        {
            return bad(format!("hidden_dim {} is not divisible by {} heads", self.hidden_dim, self.heads));
        }
        Ok(())
    }

    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        Sha256::digest(serde_json::to_vec(self).expect("config serialises")).into()
    }
}

/// Strength that page j follows page i, for every ordered slot pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseScores {
    n: usize,
    s: Vec<f64>,
}

impl PairwiseScores {
    pub fn new(n: usize, s: Vec<f64>) -> Result<Self, ModelError> {
        if s.len() != n * n {
            return Err(ModelError::Config(format!("score matrix has {} entries, expected {}", s.len(), n * n)));
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(NumError::Diverged("non-finite pairwise score".into()).into());
        }
        Ok(Self { n, s })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.s
    }
}

/// score_i = (1/N)Σ_j s_ji − (1/N)Σ_j s_ij over j ≠ i. A high score means many
/// predecessors, so slots are sorted ascending.
pub fn aggregate_scores(s: &PairwiseScores) -> (Vec<f64>, Ordering) {
    aggregate_scores_with(s, false)
}

pub fn aggregate_scores_with(s: &PairwiseScores, descending: bool) -> (Vec<f64>, Ordering) {
    let n = s.n;
    let inv = 1.0 / n as f64;
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let before: f64 = (0..n).filter(|&j| j != i).map(|j| s.get(j, i)).sum();
            let after: f64 = (0..n).filter(|&j| j != i).map(|j| s.get(i, j)).sum();
            inv * before - inv * after
        })
        .collect();
    let ordering = if descending {
        let neg: Vec<f64> = scores.iter().map(|x| -x).collect();
        Ordering::by_ascending_score(&neg)
    } else {
        Ordering::by_ascending_score(&scores)
    };
    (scores, ordering)
}

/// Greedy pointer decoding: at each step pick the highest logit among unused
/// slots (lowest slot on ties; NaN never wins), then hand the last slot over
/// without a model call.
pub fn greedy_decode<F>(n: usize, mut step_logits: F) -> Result<Ordering, ModelError>
where
    F: FnMut(&[usize]) -> Result<Vec<f32>, ModelError>,
{
    let mut used = vec![false; n];
    let mut chosen = Vec::with_capacity(n);
    while chosen.len() + 1 < n {
        let logits = step_logits(&chosen)?;
        let mut best: Option<(usize, f32)> = None;
        for j in (0..n).filter(|&j| !used[j]) {
            let v = if logits[j].is_nan() { f32::NEG_INFINITY } else { logits[j] };
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        let (j, _) = best.expect("an unused slot remains");
        used[j] = true;
        chosen.push(j);
    }
    if let Some(last) = (0..n).find(|&j| !used[j]) {
        chosen.push(last);
    }
    Ok(Ordering::new(chosen).expect("greedy decoding selects each slot once"))
}

/// Keep-mask for teacher-forced pointer steps: row t allows every slot not
/// among the first t pages of `order`.
pub fn pointer_step_mask(order: &[usize], steps: usize) -> Vec<bool> {
    let n = order.len();
    let mut mask = vec![true; steps * n];
    for t in 0..steps {
        for &used in &order[..t] {
            mask[t * n + used] = false;
        }
    }
    mask
}

/// Training-time outputs, before any loss.
pub enum TrainOutput {
    /// n×1 position regression scores.
    Position { scores: Var },
    /// (n−1)×n step logits with keep-mask and true next slots.
    Pointer { logits: Var, mask: Vec<bool>, targets: Vec<usize> },
    /// n×n comes-after scores.
    Pairwise { scores: Var },
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub ordering: Ordering,
    /// Per-slot position scores (BiLSTM head or pairwise aggregate).
    pub position_scores: Option<Vec<f64>>,
    pub pairwise: Option<PairwiseScores>,
    /// Encoder self-attention, one heads×n×n stack per layer.
    pub attention: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug)]
pub enum Net {
    BilstmPos(BilstmPos),
    PointerMlp(PointerMlp),
    PointerLstm(PointerLstm),
    Seq2Seq(Seq2Seq),
    PairwiseRank(PairwiseRank),
}

impl Net {
    pub fn build<S: Real>(cfg: &ModelConfig, store: &mut ParamStore<S>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = SeedStream::new(cfg.seed).split("init").rng();
        Ok(match cfg.arch {
            Arch::BilstmPos => Net::BilstmPos(BilstmPos::new(store, &mut rng, cfg)),
            Arch::PointerMlp => Net::PointerMlp(PointerMlp::new(store, &mut rng, cfg)),
            Arch::PointerLstm => Net::PointerLstm(PointerLstm::new(store, &mut rng, cfg)),
            Arch::Seq2Seq => Net::Seq2Seq(Seq2Seq::new(store, &mut rng, cfg)?),
            Arch::PairwiseRank => Net::PairwiseRank(PairwiseRank::new(store, &mut rng, cfg)?),
        })
    }

    pub fn teacher_forced<S: Real>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
        truth_rank: &[usize],
    ) -> Result<TrainOutput, ModelError> {
        let n = g.value(x).rows();
        if n < 2 {
            return Err(ModelError::TooShort(n));
        }
        let mut order = vec![0; n];
        for (slot, &r) in truth_rank.iter().enumerate() {
            order[r] = slot;
        }
        Ok(match self {
            Net::BilstmPos(m) => TrainOutput::Position { scores: m.forward(g, ps, x)? },
            Net::PointerMlp(m) => m.teacher_forced(g, ps, x, &order)?,
            Net::PointerLstm(m) => m.teacher_forced(g, ps, x, &order)?,
            Net::Seq2Seq(m) => m.teacher_forced(g, ps, x, &order)?,
            Net::PairwiseRank(m) => TrainOutput::Pairwise { scores: m.forward(g, ps, x)?.0 },
        })
    }
}

/// A built network with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore<f32>,
    net: Net,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        let mut params = ParamStore::new();
        let net = Net::build(&config, &mut params)?;
        Ok(Self { config, params, net })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_input(&self, pages: &Tensor<f32>) -> Result<usize, ModelError> {
        let n = pages.rows();
        if n < 2 {
            return Err(ModelError::TooShort(n));
        }
        if n > self.config.max_len {
            return Err(ModelError::Length { n, max: self.config.max_len });
        }
        if pages.cols() != self.config.input_dim {
            return Err(ModelError::InputDim { expected: self.config.input_dim, got: pages.cols() });
        }
        Ok(n)
    }

    /// Orders the pages of an n×d matrix given in slot order.
    pub fn predict(&self, pages: &Tensor<f32>) -> Result<Prediction, ModelError> {
        self.check_input(pages)?;
        let ps = &self.params;
        match &self.net {
            Net::BilstmPos(m) => {
                let mut g = Graph::new();
                let x = g.constant(pages.clone());
                let s = m.forward(&mut g, ps, x)?;
                let scores: Vec<f64> = g.value(s).data().iter().map(|&v| v as f64).collect();
                Ok(Prediction {
                    ordering: Ordering::by_ascending_score(&scores),
                    position_scores: Some(scores),
                    pairwise: None,
                    attention: Vec::new(),
                })
            }
            Net::PointerMlp(m) => Ok(Self::sequence_only(m.decode(ps, pages)?)),
            Net::PointerLstm(m) => Ok(Self::sequence_only(m.decode(ps, pages)?)),
            Net::Seq2Seq(m) => {
                let (ordering, attention) = m.decode(ps, pages)?;
                Ok(Prediction { ordering, position_scores: None, pairwise: None, attention })
            }
            Net::PairwiseRank(m) => {
                let (scores, attention) = m.pairwise_forward(ps, pages)?;
                let (pos, ordering) = aggregate_scores_with(&scores, self.config.descending_scores);
                Ok(Prediction { ordering, position_scores: Some(pos), pairwise: Some(scores), attention })
            }
        }
    }

    pub fn predict_instance(&self, inst: &ShuffledInstance) -> Result<Prediction, ModelError> {
        self.predict(&inst.page_matrix())
    }

    pub fn order(&self, inst: &ShuffledInstance) -> Result<Ordering, ModelError> {
        Ok(self.predict_instance(inst)?.ordering)
    }

    fn sequence_only(ordering: Ordering) -> Prediction {
        Prediction { ordering, position_scores: None, pairwise: None, attention: Vec::new() }
    }
}
