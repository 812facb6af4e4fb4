use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{load_or_train, BenchConfig, BenchData, BenchError, BenchRow};
use crate::corpus::{Document, LengthBucket, ShuffledInstance};
use crate::metrics::{attention_locality, stability_report, LocalityStats};
use crate::models::{Arch, Model, PeVariant};
use crate::numcore::Tensor;
use crate::training::{evaluate, fit, EpochRecord};

/// Validation-τ volatility of one positional-encoding variant.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityRow {
    pub variant: PeVariant,
    pub sigma: f64,
    pub negative_epochs: Vec<usize>,
    pub epochs: usize,
    pub reference_sigma: f64,
}

pub fn reference_sigma(variant: PeVariant) -> f64 {
    match variant {
        PeVariant::Learned => 0.262,
        PeVariant::Sinusoidal => 0.169,
        PeVariant::None => 0.347,
    }
}

/// One row per seq2seq variant that has at least two logged epochs.
pub fn stability_rows(logs: &BTreeMap<String, Vec<EpochRecord>>) -> Result<Vec<StabilityRow>, BenchError> {
    let mut out = Vec::new();
    for row in [BenchRow::Seq2seqLearned, BenchRow::Seq2seqSinusoidal, BenchRow::Seq2seqNone] {
        let Some(log) = logs.get(row.key()).filter(|l| l.len() >= 2) else { continue };
        let series: Vec<f64> = log.iter().map(|r| r.val_tau).collect();
        let rep = stability_report(&series)?;
        let variant = row.pe_variant().expect("seq2seq row");
        out.push(StabilityRow {
            variant,
            sigma: rep.sigma,
            negative_epochs: rep.negative_epochs,
            epochs: series.len(),
            reference_sigma: reference_sigma(variant),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalityRow {
    pub short: LocalityStats,
    pub long: LocalityStats,
    pub short_docs: usize,
    pub long_docs: usize,
    /// Long over short average attention distance.
    pub ratio: f64,
}

pub const REFERENCE_LOCALITY: [f64; 5] = [0.779, 1.53, 0.208, 7.59, 4.96];

/// Moves attention from slot coordinates to reading-order coordinates:
/// entry (rank_i, rank_j) of the result is entry (i, j) of the input.
fn by_true_rank(stack: &Tensor<f32>, truth_rank: &[usize]) -> Tensor<f32> {
    let n = truth_rank.len();
    let src = stack.data();
    let mut out = vec![0.0; src.len()];
    for (m, block) in src.chunks(n * n).enumerate() {
        for i in 0..n {
            for j in 0..n {
                out[m * n * n + truth_rank[i] * n + truth_rank[j]] = block[i * n + j];
            }
        }
    }
    Tensor::new(stack.dims().to_vec(), out).expect("same shape")
}

fn mean_locality(model: &Model, docs: &[&ShuffledInstance], window: usize) -> Result<LocalityStats, BenchError> {
    let per_doc = docs
        .par_iter()
        .map(|inst| {
            let pred = model.predict_instance(inst)?;
            if pred.attention.is_empty() {
                return Err(BenchError::Config(format!("{:?} exposes no attention", model.arch())));
            }
            let stacks: Vec<_> = pred.attention.iter().map(|s| by_true_rank(s, inst.truth_rank())).collect();
            Ok(attention_locality(&stacks, window)?)
        })
        .collect::<Result<Vec<_>, BenchError>>()?;
    let k = per_doc.len() as f64;
    Ok(LocalityStats {
        local_fraction: per_doc.iter().map(|s| s.local_fraction).sum::<f64>() / k,
        avg_distance: per_doc.iter().map(|s| s.avg_distance).sum::<f64>() / k,
    })
}

/// Attention locality of the short specialist on 2-5 page test documents
/// against the long specialist on 21-25 page ones, averaged per document.
/// Distances are measured in true reading order. Returns `None` when either
/// bucket has no test documents.
pub fn locality_experiment(
    short: &Model,
    long: &Model,
    test: &[ShuffledInstance],
    window: usize,
) -> Result<Option<LocalityRow>, BenchError> {
    let pick = |b: LengthBucket| test.iter().filter(|i| i.bucket() == b).collect::<Vec<_>>();
    let (s_docs, l_docs) = (pick(LengthBucket::B2_5), pick(LengthBucket::B21_25));
    if s_docs.is_empty() || l_docs.is_empty() {
        log::warn!("locality experiment skipped: a bucket has no test documents");
        return Ok(None);
    }
    let s = mean_locality(short, &s_docs, window)?;
    let l = mean_locality(long, &l_docs, window)?;
    let ratio = if s.avg_distance > 0.0 { l.avg_distance / s.avg_distance } else { f64::INFINITY };
    Ok(Some(LocalityRow { short: s, long: l, short_docs: s_docs.len(), long_docs: l_docs.len(), ratio }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferResult {
    pub tau_in_domain: f64,
    pub tau_transfer: f64,
    pub in_domain_docs: usize,
    pub transfer_docs: usize,
    pub log: Vec<EpochRecord>,
}

pub const REFERENCE_TRANSFER: (f64, f64) = (0.8817, 0.1618);

/// Trains the pairwise model on 2-5 page documents only and evaluates it
/// on 2-5 and 21-25 page test documents.
pub fn transfer_experiment(
    data: &BenchData,
    cfg: &BenchConfig,
    input_dim: usize,
) -> Result<TransferResult, BenchError> {
    const KEY: &str = "transfer_short";
    let short =
        |docs: &[Document]| docs.iter().filter(|d| LengthBucket::B2_5.contains(d.len())).cloned().collect::<Vec<_>>();
    let train = short(&data.splits.train);
    let val: Vec<ShuffledInstance> = data.val.iter().filter(|i| i.bucket() == LengthBucket::B2_5).cloned().collect();
    let pick = |b: LengthBucket| data.test.iter().filter(|i| i.bucket() == b).cloned().collect::<Vec<_>>();
    let (t_in, t_long) = (pick(LengthBucket::B2_5), pick(LengthBucket::B21_25));
    if train.is_empty() || val.is_empty() || t_in.is_empty() || t_long.is_empty() {
        return Err(BenchError::Config("transfer needs 2-5 page train/val/test and 21-25 page test documents".into()));
    }
    let mcfg = cfg.model_config(Arch::PairwiseRank, PeVariant::Learned, input_dim, KEY);
    let (model, log) = load_or_train(cfg, KEY, &mcfg, || {
        let tcfg = cfg.train_config(KEY);
        let mut model = Model::new(mcfg.clone())?;
        let r = fit(&mut model, &train, &val, &tcfg)?;
        Ok((model, r.log, tcfg.seed))
    })?;
    let (s_in, _) = evaluate(&model, &t_in)?;
    let (s_long, _) = evaluate(&model, &t_long)?;
    Ok(TransferResult {
        tau_in_domain: s_in.overall,
        tau_transfer: s_long.overall,
        in_domain_docs: t_in.len(),
        transfer_docs: t_long.len(),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::tests::{quick_config, quick_docs};
    use crate::bench::{prepare_data, run_benchmark};

    #[test]
    fn reindexing_moves_mass_to_reading_order() {
        // Slot 0 holds page 2, slot 1 page 0, slot 2 page 1; each slot attends
        // to the slot holding the next page in reading order.
        let truth = [2, 0, 1];
        let mut a = vec![0.0f32; 9];
        a[1 * 3 + 2] = 1.0;
        a[2 * 3 + 0] = 1.0;
        a[0 * 3 + 0] = 1.0;
        let t = Tensor::new(vec![1, 3, 3], a).unwrap();
        let r = by_true_rank(&t, &truth);
        assert_eq!(r.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let s = attention_locality(&[r], 0).unwrap();
        assert!((s.local_fraction - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn stability_only_for_logged_variants() {
        let rec =
            |t| EpochRecord { epoch: 0, stage: "all".into(), train_loss: 0.0, val_tau: t, val_per_bucket: [None; 5] };
        let mut logs = BTreeMap::new();
        logs.insert("seq2seq_none".to_string(), vec![rec(0.0), rec(1.0), rec(-0.5)]);
        logs.insert("seq2seq_learned".to_string(), vec![rec(0.3)]);
        let rows = stability_rows(&logs).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].variant, PeVariant::None);
        assert_eq!(rows[0].negative_epochs, vec![2]);
        assert_eq!(rows[0].reference_sigma, 0.347);
    }

    #[test]
    fn locality_and_transfer_on_a_small_run() {
        let docs = quick_docs();
        let cfg = BenchConfig { rows: vec![BenchRow::SpecializedDirect], ..quick_config() };
        let out = run_benchmark(&docs, &cfg).unwrap();
        let loc = out.locality.expect("both buckets present");
        assert!((0.0..=1.0).contains(&loc.short.local_fraction));
        assert_eq!(loc.ratio, loc.long.avg_distance / loc.short.avg_distance);
        let tr = out.transfer.unwrap();
        assert!(tr.in_domain_docs > 0 && tr.transfer_docs > 0);

        let data = prepare_data(&docs, &cfg).unwrap();
        let again = transfer_experiment(&data, &cfg, 8).unwrap();
        assert_eq!(again, tr);
    }
}
