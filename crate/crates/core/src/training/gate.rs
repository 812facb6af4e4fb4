//! Finite-difference gate over every layer, loss and architecture, in f64.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::losses::{loss_for, loss_pairwise, loss_pointer, loss_position, make_pairwise_targets};
use super::TrainError;
use crate::models::{pointer_step_mask, Arch, ModelConfig, Net, PeVariant, PositionalEncoding};
use crate::numcore::nn::{
    causal_mask, BiLstm, DecoderLayer, Embedding, EncoderLayer, FeedForward, LayerNorm, Linear, LstmCell,
    MultiHeadAttention,
};
use crate::numcore::{
    grad_check, GradCheckOptions, GradCheckReport, Graph, NumError, ParamStore, SeedStream, Tensor, Var,
};

#[derive(Clone, Debug)]
pub struct GateResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl GateResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

const N: usize = 4;
const D: usize = 4;

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let data = (0..dims.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(dims.to_vec(), data).expect("positive dims")
}

/// Σ out ⊙ R for a fixed random R, so every output entry carries a distinct weight.
fn probe(g: &mut Graph<f64>, out: Var, r: &Tensor<f64>) -> Result<Var, NumError> {
    let r = g.constant(r.clone());
    let p = g.mul(out, r)?;
    Ok(g.sum_all(p))
}

fn num(e: impl std::fmt::Display) -> NumError {
    NumError::Shape(e.to_string())
}

struct Gate {
    opts: GradCheckOptions,
    seed: SeedStream,
    results: Vec<GateResult>,
}

impl Gate {
    /// `build` registers parameters and returns the forward pass; the input
    /// `x` (n×d) is registered as a parameter too, so input gradients are checked.
    fn layer<B, F>(&mut self, name: &str, x_dims: &[usize], out_dims: &[usize], build: B) -> Result<(), TrainError>
    where
        B: FnOnce(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Result<F, TrainError>,
        F: Fn(&mut Graph<f64>, &ParamStore<f64>, Var) -> Result<Var, NumError>,
    {
        let mut rng = self.seed.split(name).rng();
        let mut ps = ParamStore::new();
        let forward = build(&mut ps, &mut rng)?;
        let x_id = ps.add("x", uniform(&mut rng, x_dims));
        let r = uniform(&mut rng, out_dims);
        let report = grad_check(
            &mut ps,
            |g, ps| {
                let x = g.param(ps, x_id);
                let out = forward(g, ps, x)?;
                probe(g, out, &r)
            },
            self.opts,
        )?;
        self.results.push(GateResult { name: name.to_string(), report });
        Ok(())
    }

    fn scalar<F>(&mut self, name: &str, mut ps: ParamStore<f64>, f: F) -> Result<(), TrainError>
    where
        F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, NumError>,
    {
        let report = grad_check(&mut ps, f, self.opts)?;
        self.results.push(GateResult { name: name.to_string(), report });
        Ok(())
    }
}

fn tiny(arch: Arch, pe_variant: PeVariant) -> ModelConfig {
    ModelConfig { layers: 1, hidden_dim: 8, heads: 2, pe_variant, ..ModelConfig::desk(arch, D, 11) }
}

/// Runs the checks and returns one result per component, in a fixed order.
pub fn gradient_gate(opts: GradCheckOptions) -> Result<Vec<GateResult>, TrainError> {
    let mut gate = Gate { opts, seed: SeedStream::new(0x9a7e), results: Vec::new() };

    gate.layer("linear", &[N, D], &[N, 3], |ps, rng| {
        let l = Linear::new(ps, rng, "lin", D, 3, true);
        Ok(move |g: &mut Graph<f64>, ps: &ParamStore<f64>, x| l.forward(g, ps, x))
    })?;
    gate.layer("layer_norm", &[N, D], &[N, D], |ps, rng| {
        let ln = LayerNorm::new(ps, "ln", D);
        for id in ps.ids().collect::<Vec<_>>() {
            *ps.get_mut(id) = uniform(rng, &[1, D]);
        }
        Ok(move |g: &mut Graph<f64>, ps: &ParamStore<f64>, x| ln.forward(g, ps, x))
    })?;
    gate.layer("embedding", &[N, D], &[N, D], |ps, rng| {
        let e = Embedding::new(ps, rng, "emb", 6, D);
        Ok(move |g: &mut Graph<f64>, ps: &ParamStore<f64>, x| {
            let rows = e.lookup(g, ps, &[3, 0, 5, 3])?;
            g.mul(rows, x)
        })
    })?;
    gate.layer("feed_forward", &[N, D], &[N, D], |ps, rng| {
        let ff = FeedForward::new(ps, rng, "ff", D, 6);
        Ok(move |g: &mut Graph<f64>, ps: &ParamStore<f64>, x| ff.forward(g, ps, x))
    })?;
    gate.layer("lstm_cell", &[N, D], &[N, 3], |ps, rng| {
        let cell = LstmCell::new(ps, rng, "cell", D, 3);
        Ok(move |g: &mut Graph<f64>, ps: &ParamStore<f64>, x| {
            let hs = cell.run(g, ps, x, false)?;
            g.concat_rows(&hs)
        })
    })?;
    gate.layer("bilstm", &[N, D], &[N, 6], |ps, rng| {
        let bi = BiLstm::new(ps, rng, "bi", D, 3);
        Ok(move |g: &mut Graph<f64>, ps: &ParamStore<f64>, x| bi.encode(g, ps, x))
    })?;
    gate.layer("multi_head_attention", &[N, D], &[N, D], |ps, rng| {
        let mha = MultiHeadAttention::new(ps, rng, "mha", D, 2)?;
        let mask = causal_mask(N);
        Ok(move |g: &mut Graph<f64>, ps: &ParamStore<f64>, x| Ok(mha.forward(g, ps, x, x, Some(&mask))?.0))
    })?;
    gate.layer("encoder_layer", &[N, D], &[N, D], |ps, rng| {
        let layer = EncoderLayer::new(ps, rng, "enc", D, 2, 8)?;
        Ok(move |g: &mut Graph<f64>, ps: &ParamStore<f64>, x| Ok(layer.forward(g, ps, x, None)?.0))
    })?;
    gate.layer("decoder_layer", &[N, D], &[3, D], |ps, rng| {
        let layer = DecoderLayer::new(ps, rng, "dec", D, 2, 8)?;
        let target = ps.add("target", uniform(rng, &[3, D]));
        let mask = causal_mask(3);
        Ok(move |g: &mut Graph<f64>, ps: &ParamStore<f64>, memory| {
            let t = g.param(ps, target);
            layer.forward(g, ps, t, memory, &mask)
        })
    })?;
    for variant in PeVariant::ALL {
        gate.layer(&format!("positional_encoding_{}", variant.label()), &[N, D], &[N, D], |ps, rng| {
            let pe = PositionalEncoding::new(ps, rng, "pe", variant, 25, D);
            Ok(move |g: &mut Graph<f64>, ps: &ParamStore<f64>, x| pe.apply(g, ps, x).map_err(num))
        })?;
    }
    gate.layer("pairwise_scorer", &[N, 8], &[N, N], |ps, _| {
        let net = Net::build(&tiny(Arch::PairwiseRank, PeVariant::Learned), ps)?;
        let Net::PairwiseRank(pr) = net else { unreachable!("built a pairwise net") };
        Ok(move |g: &mut Graph<f64>, ps: &ParamStore<f64>, enc| pr.score(g, ps, enc).map_err(num))
    })?;

    let mut rng = gate.seed.split("losses").rng();
    let truth = [2usize, 0, 3, 1];
    {
        let mut ps = ParamStore::new();
        let s = ps.add("scores", uniform(&mut rng, &[N, N]));
        let y = make_pairwise_targets(&truth);
        gate.scalar("loss_pairwise", ps, |g, ps| {
            let v = g.param(ps, s);
            loss_pairwise(g, v, &y).map_err(num)
        })?;
    }
    {
        let mut ps = ParamStore::new();
        let s = ps.add("logits", uniform(&mut rng, &[N - 1, N]));
        let order = [1usize, 3, 0, 2];
        let mask = pointer_step_mask(&order, N - 1);
        gate.scalar("loss_pointer", ps, |g, ps| {
            let v = g.param(ps, s);
            loss_pointer(g, v, &order[..N - 1], &mask).map_err(num)
        })?;
    }
    {
        let mut ps = ParamStore::new();
        let s = ps.add("scores", uniform(&mut rng, &[N, 1]));
        gate.scalar("loss_position", ps, |g, ps| {
            let v = g.param(ps, s);
            loss_position(g, v, &truth).map_err(num)
        })?;
    }

    let archs = [
        ("model_bilstm_position", tiny(Arch::BilstmPos, PeVariant::Learned)),
        ("model_pointer_mlp", tiny(Arch::PointerMlp, PeVariant::Learned)),
        ("model_pointer_lstm", tiny(Arch::PointerLstm, PeVariant::Learned)),
        ("model_seq2seq", tiny(Arch::Seq2Seq, PeVariant::Learned)),
        ("model_pairwise", tiny(Arch::PairwiseRank, PeVariant::Learned)),
    ];
    for (name, cfg) in archs {
        let mut ps = ParamStore::new();
        let net = Net::build(&cfg, &mut ps)?;
        let x = uniform(&mut rng, &[N, D]);
        gate.scalar(name, ps, |g, ps| {
            let x = g.constant(x.clone());
            let out = net.teacher_forced(g, ps, x, &truth).map_err(num)?;
            loss_for(g, out, &truth).map_err(num)
        })?;
    }
    Ok(gate.results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes() {
        let results = gradient_gate(GradCheckOptions::default()).unwrap();
        assert!(results.len() >= 20);
        for r in &results {
            assert!(!r.report.entries.is_empty(), "{} checked nothing", r.name);
            assert!(r.passed(), "{} max rel error {}", r.name, r.report.max_rel_error());
        }
    }
}
