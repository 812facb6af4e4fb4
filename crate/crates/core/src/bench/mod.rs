//! End-to-end experiments: the method comparison table, the positional
//! encoding ablation, stability, attention locality and length transfer.

mod experiments;
mod figures;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{shuffle_all, split_corpus, CorpusError, Document, LengthBucket, ShuffledInstance, Splits};
use crate::heuristics::{order_greedy_nn, order_random, order_tsp_nn};
use crate::metrics::{mean_tau, MetricError, Ordering, TauSummary};
use crate::models::{
    read_checkpoint, write_checkpoint, Arch, Checkpoint, CheckpointError, Model, ModelConfig, ModelError, PeVariant,
};
use crate::numcore::SeedStream;
use crate::training::{fit, train_ensemble, EpochRecord, SpecialistEnsemble, Strategy, TrainConfig, TrainError};
use crate::util::sha256_hex;

pub use experiments::{
    locality_experiment, stability_rows, transfer_experiment, LocalityRow, StabilityRow, TransferResult,
    REFERENCE_LOCALITY, REFERENCE_TRANSFER,
};
pub use figures::{
    emit_figures, parse_fig1, parse_fig2, parse_fig3, parse_fig4, Fig2Row, Fig3Row, FIG1_FILE, FIG2_FILE, FIG3_FILE,
    FIG4_FILE,
};
pub use report::{parse_report_csv, render_report_csv, render_report_text, write_outputs, REPORT_CSV, REPORT_TXT};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark config: {0}")]
    Config(String),
    #[error("malformed {file}: {message}")]
    Parse { file: String, message: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One line of the method comparison table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchRow {
    Random,
    GreedyNn,
    TspNn,
    BilstmPosition,
    PointerMlp,
    PointerLstm,
    Seq2seqLearned,
    Seq2seqSinusoidal,
    Seq2seqNone,
    Pairwise,
    SpecializedDirect,
    SpecializedCurriculum,
}

/// Published reference numbers: τ per bucket and the parameter count label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceRow {
    pub taus: [f64; 5],
    pub params: &'static str,
}

impl BenchRow {
    pub const ALL: [BenchRow; 12] = [
        BenchRow::Random,
        BenchRow::GreedyNn,
        BenchRow::TspNn,
        BenchRow::BilstmPosition,
        BenchRow::PointerMlp,
        BenchRow::PointerLstm,
        BenchRow::Seq2seqLearned,
        BenchRow::Seq2seqSinusoidal,
        BenchRow::Seq2seqNone,
        BenchRow::Pairwise,
        BenchRow::SpecializedDirect,
        BenchRow::SpecializedCurriculum,
    ];

    pub fn key(self) -> &'static str {
        match self {
            BenchRow::Random => "random",
            BenchRow::GreedyNn => "greedy_nn",
            BenchRow::TspNn => "tsp_nn",
            BenchRow::BilstmPosition => "bilstm_position",
            BenchRow::PointerMlp => "pointer_mlp",
            BenchRow::PointerLstm => "pointer_lstm",
            BenchRow::Seq2seqLearned => "seq2seq_learned",
            BenchRow::Seq2seqSinusoidal => "seq2seq_sinusoidal",
            BenchRow::Seq2seqNone => "seq2seq_none",
            BenchRow::Pairwise => "pairwise",
            BenchRow::SpecializedDirect => "specialized_direct",
            BenchRow::SpecializedCurriculum => "specialized_curriculum",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchRow::Random => "Random",
            BenchRow::GreedyNn => "Greedy NN",
            BenchRow::TspNn => "TSP NN",
            BenchRow::BilstmPosition => "BiLSTM Position",
            BenchRow::PointerMlp => "Pointer MLP",
            BenchRow::PointerLstm => "Pointer LSTM",
            BenchRow::Seq2seqLearned => "seq2seq (learned)",
            BenchRow::Seq2seqSinusoidal => "seq2seq (sinusoidal)",
            BenchRow::Seq2seqNone => "seq2seq (no position)",
            BenchRow::Pairwise => "Pairwise Ranking",
            BenchRow::SpecializedDirect => "Specialized PR (Direct)",
            BenchRow::SpecializedCurriculum => "Specialized PR (Curriculum)",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.key() == s || r.name() == s)
    }

    pub fn reference(self) -> ReferenceRow {
        let (taus, params) = match self {
            BenchRow::Random => ([0.007, 0.002, -0.001, 0.003, 0.001], "0"),
            BenchRow::GreedyNn => ([0.168, 0.091, 0.062, 0.045, 0.033], "0"),
            BenchRow::TspNn => ([0.113, 0.147, 0.111, 0.093, 0.022], "0"),
            BenchRow::BilstmPosition => ([0.859, 0.667, 0.503, 0.402, 0.318], "3.7M"),
            BenchRow::PointerMlp => ([0.847, 0.682, 0.551, 0.448, 0.371], "3.1M"),
            BenchRow::PointerLstm => ([0.889, 0.703, 0.572, 0.461, 0.362], "9.5M"),
            BenchRow::Seq2seqLearned => ([0.918, 0.787, 0.343, 0.094, 0.014], "45M"),
            BenchRow::Seq2seqSinusoidal => ([0.893, 0.763, 0.396, 0.197, 0.061], "45M"),
            BenchRow::Seq2seqNone => ([0.877, 0.770, 0.369, 0.051, 0.026], "45M"),
            BenchRow::Pairwise => ([0.922, 0.860, 0.509, 0.300, 0.175], "531M"),
            BenchRow::SpecializedDirect => ([0.953, 0.899, 0.722, 0.515, 0.380], "~2.6B"),
            BenchRow::SpecializedCurriculum => ([0.915, 0.882, 0.662, 0.379, 0.233], "~2.6B"),
        };
        ReferenceRow { taus, params }
    }

    /// Architecture of a single learned model, if the row is one.
    pub fn single_arch(self) -> Option<(Arch, PeVariant)> {
        match self {
            BenchRow::BilstmPosition => Some((Arch::BilstmPos, PeVariant::Learned)),
            BenchRow::PointerMlp => Some((Arch::PointerMlp, PeVariant::Learned)),
            BenchRow::PointerLstm => Some((Arch::PointerLstm, PeVariant::Learned)),
            BenchRow::Seq2seqLearned => Some((Arch::Seq2Seq, PeVariant::Learned)),
            BenchRow::Seq2seqSinusoidal => Some((Arch::Seq2Seq, PeVariant::Sinusoidal)),
            BenchRow::Seq2seqNone => Some((Arch::Seq2Seq, PeVariant::None)),
            BenchRow::Pairwise => Some((Arch::PairwiseRank, PeVariant::Learned)),
            _ => None,
        }
    }

    pub fn ensemble_strategy(self) -> Option<Strategy> {
        match self {
            BenchRow::SpecializedDirect => Some(Strategy::SpecializedDirect),
            BenchRow::SpecializedCurriculum => Some(Strategy::SpecializedCurriculum),
            _ => None,
        }
    }

    /// Positional-encoding variant for the seq2seq ablation rows.
    pub fn pe_variant(self) -> Option<PeVariant> {
        match self {
            BenchRow::Seq2seqLearned => Some(PeVariant::Learned),
            BenchRow::Seq2seqSinusoidal => Some(PeVariant::Sinusoidal),
            BenchRow::Seq2seqNone => Some(PeVariant::None),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub rows: Vec<BenchRow>,
    /// Drives the split, the shuffles, model initialisation and training.
    pub seed: u64,
    pub split: (f64, f64, f64),
    /// Shared by every learned row; `strategy` and `target_bucket` are set per row.
    pub train: TrainConfig,
    /// Overrides for every desk preset, mainly for quick runs.
    pub layers: Option<usize>,
    pub hidden_dim: Option<usize>,
    /// Six-layer, 512-wide seq2seq instead of the desk preset.
    pub seq2seq_full: bool,
    /// Grow specialists with their bucket; otherwise all five share the pairwise preset.
    pub scale_specialists: bool,
    /// Train when a checkpoint is missing instead of failing.
    pub train_missing: bool,
    /// Where checkpoints are read from and written to.
    pub checkpoint_dir: Option<PathBuf>,
    pub locality_window: usize,
    pub run_transfer: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            rows: BenchRow::ALL.to_vec(),
            seed: 7,
            split: (0.70, 0.15, 0.15),
            train: TrainConfig::default(),
            layers: None,
            hidden_dim: None,
            seq2seq_full: false,
            scale_specialists: false,
            train_missing: true,
            checkpoint_dir: None,
            locality_window: 2,
            run_transfer: true,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.rows.is_empty() {
            return Err(BenchError::Config("no rows selected".into()));
        }
        let mut seen = self.rows.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.rows.len() {
            return Err(BenchError::Config("rows are listed more than once".into()));
        }
        if !self.train_missing
            && self.checkpoint_dir.is_none()
            && self.rows.iter().any(|r| r.single_arch().is_some() || r.ensemble_strategy().is_some())
        {
            return Err(BenchError::Config("learned rows need a checkpoint_dir or train_missing".into()));
        }
        TrainConfig { strategy: Strategy::Universal, target_bucket: None, ..self.train.clone() }.validate()?;
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }

    fn seeds(&self) -> SeedStream {
        SeedStream::new(self.seed)
    }

    /// Desk preset for `arch`, with overrides applied.
    pub fn model_config(&self, arch: Arch, pe: PeVariant, input_dim: usize, key: &str) -> ModelConfig {
        let seed = self.seeds().split("model").split(key).seed();
        let base = if arch == Arch::Seq2Seq && self.seq2seq_full {
            ModelConfig::full_seq2seq(input_dim, pe, seed)
        } else {
            ModelConfig { pe_variant: pe, ..ModelConfig::desk(arch, input_dim, seed) }
        };
        ModelConfig {
            layers: self.layers.unwrap_or(base.layers),
            hidden_dim: self.hidden_dim.unwrap_or(base.hidden_dim),
            ..base
        }
    }

    pub fn train_config(&self, key: &str) -> TrainConfig {
        TrainConfig { seed: self.seeds().split("train").split(key).seed(), ..self.train.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub key: String,
    pub name: String,
    pub per_bucket: [Option<f64>; 5],
    pub overall: f64,
    pub params: usize,
    pub docs: [usize; 5],
    pub reference: [f64; 5],
    pub reference_params: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub corpus_digest: String,
    pub config_digest: String,
    pub seed: u64,
    pub n_test_docs: usize,
    pub test_docs_per_bucket: [usize; 5],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub meta: ReportMeta,
    /// Unix seconds at assembly; kept out of the report files so reruns compare equal.
    pub timestamp: u64,
}

impl EvalReport {
    pub fn row(&self, key: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.key == key)
    }
}

/// Everything one benchmark run produces.
#[derive(Clone, Debug)]
pub struct BenchOutput {
    pub report: EvalReport,
    /// Per-epoch training logs of single-model rows, keyed by row key.
    pub logs: BTreeMap<String, Vec<EpochRecord>>,
    pub stability: Vec<StabilityRow>,
    pub locality: Option<LocalityRow>,
    pub transfer: Option<TransferResult>,
}

/// Digest over document ids and page bytes.
pub fn corpus_digest(docs: &[Document]) -> String {
    let mut bytes = Vec::new();
    for d in docs {
        bytes.extend_from_slice(d.doc_id.as_bytes());
        bytes.push(0);
        for p in d.pages() {
            for v in p.values() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    sha256_hex(&bytes)
}

/// The seeded split and fixed shuffles every row is evaluated on.
pub struct BenchData {
    pub splits: Splits,
    pub val: Vec<ShuffledInstance>,
    pub test: Vec<ShuffledInstance>,
}

pub fn prepare_data(docs: &[Document], cfg: &BenchConfig) -> Result<BenchData, BenchError> {
    let seeds = cfg.seeds();
    let splits = split_corpus(docs, cfg.split, seeds.split("split"))?;
    if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
        return Err(BenchError::Config("every split needs at least one document".into()));
    }
    let val = shuffle_all(&splits.val, seeds.split("val-shuffle"));
    let test = shuffle_all(&splits.test, seeds.split("test-shuffle"));
    Ok(BenchData { splits, val, test })
}

fn checkpoint_path(cfg: &BenchConfig, file: &str) -> Option<PathBuf> {
    cfg.checkpoint_dir.as_ref().map(|d| d.join(format!("{file}.ckpt")))
}

fn save_with_log(model: &Model, seed: u64, log: &[EpochRecord], path: &Path) -> Result<(), BenchError> {
    let meta = serde_json::json!({ "log": log });
    let ck = Checkpoint { config: model.config().clone(), train_seed: seed, meta, records: model.to_records() };
    write_checkpoint(&ck, path)?;
    Ok(())
}

/// Loads `path` when it exists (checking it was built from `expected`),
/// otherwise trains with `train` if allowed and saves the result.
pub(crate) fn load_or_train<F>(
    cfg: &BenchConfig,
    file: &str,
    expected: &ModelConfig,
    train: F,
) -> Result<(Model, Vec<EpochRecord>), BenchError>
where
    F: FnOnce() -> Result<(Model, Vec<EpochRecord>, u64), BenchError>,
{
    let path = checkpoint_path(cfg, file);
    if let Some(p) = path.as_ref().filter(|p| p.exists()) {
        let ck = read_checkpoint(p)?;
        if ck.config != *expected {
            return Err(BenchError::Config(format!("{} was trained with a different model config", p.display())));
        }
        let log = match ck.meta.get("log") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| CheckpointError::Format(e.to_string()))?,
            None => Vec::new(),
        };
        log::info!("loaded {}", p.display());
        return Ok((Model::from_records(ck.config, &ck.records)?, log));
    }
    if !cfg.train_missing {
        let shown = path.map_or_else(|| file.to_string(), |p| p.display().to_string());
        return Err(BenchError::Config(format!("checkpoint {shown} is missing and training is disabled")));
    }
    let (model, log, seed) = train()?;
    if let Some(p) = path {
        save_with_log(&model, seed, &log, &p)?;
    }
    Ok((model, log))
}

fn single_model(
    row: BenchRow,
    data: &BenchData,
    cfg: &BenchConfig,
    input_dim: usize,
) -> Result<(Model, Vec<EpochRecord>), BenchError> {
    let (arch, pe) = row.single_arch().expect("single-model row");
    let mcfg = cfg.model_config(arch, pe, input_dim, row.key());
    load_or_train(cfg, row.key(), &mcfg, || {
        log::info!("training {}", row.name());
        let tcfg = cfg.train_config(row.key());
        let mut model = Model::new(mcfg.clone())?;
        let r = fit(&mut model, &data.splits.train, &data.val, &tcfg)?;
        Ok((model, r.log, tcfg.seed))
    })
}

fn ensemble(
    row: BenchRow,
    data: &BenchData,
    cfg: &BenchConfig,
    input_dim: usize,
) -> Result<SpecialistEnsemble, BenchError> {
    let strategy = row.ensemble_strategy().expect("ensemble row");
    let base = cfg.model_config(Arch::PairwiseRank, PeVariant::Learned, input_dim, row.key());
    let tcfg = cfg.train_config(row.key());
    let files: Vec<String> = LengthBucket::ALL.iter().map(|b| format!("{}.{}", row.key(), b.label())).collect();
    let expected: Vec<ModelConfig> = LengthBucket::ALL
        .iter()
        .map(|&b| {
            let c = if cfg.scale_specialists { base.scaled_for(b) } else { base.clone() };
            ModelConfig { seed: SeedStream::new(base.seed).split(&b.label()).seed(), ..c }
        })
        .collect();
    let all_present = files.iter().all(|f| checkpoint_path(cfg, f).is_some_and(|p| p.exists()));
    if !all_present {
        if !cfg.train_missing {
            return Err(BenchError::Config(format!(
                "{} specialist checkpoints are missing and training is disabled",
                row.key()
            )));
        }
        log::info!("training {}", row.name());
        let (ens, results) =
            train_ensemble(&base, cfg.scale_specialists, strategy, &data.splits.train, &data.val, &tcfg)?;
        for ((model, r), file) in ens.models().iter().zip(&results).zip(&files) {
            if let Some(p) = checkpoint_path(cfg, file) {
                save_with_log(model, tcfg.seed, &r.log, &p)?;
            }
        }
        return Ok(ens);
    }
    let models = files
        .iter()
        .zip(&expected)
        .map(|(f, e)| load_or_train(cfg, f, e, || unreachable!("checkpoint present")).map(|(m, _)| m))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SpecialistEnsemble::new(models)?)
}

fn summarise(
    row: BenchRow,
    test: &[ShuffledInstance],
    preds: &[Ordering],
    params: usize,
) -> Result<ReportRow, BenchError> {
    let s: TauSummary = mean_tau(test, preds)?;
    let reference = row.reference();
    Ok(ReportRow {
        key: row.key().to_string(),
        name: row.name().to_string(),
        per_bucket: LengthBucket::ALL.map(|b| s.bucket(b)),
        overall: s.overall,
        params,
        docs: LengthBucket::ALL.map(|b| s.per_bucket.get(&b).map_or(0, |m| m.count)),
        reference: reference.taus,
        reference_params: reference.params.to_string(),
    })
}

fn predict_all<F>(test: &[ShuffledInstance], f: F) -> Result<Vec<Ordering>, BenchError>
where
    F: Fn(&ShuffledInstance) -> Result<Ordering, BenchError> + Sync + Send,
{
    test.par_iter().map(f).collect()
}

/// Trains or loads every configured row, evaluates all of them on the same
/// shuffled test instances, and runs the side experiments.
pub fn run_benchmark(docs: &[Document], cfg: &BenchConfig) -> Result<BenchOutput, BenchError> {
    cfg.validate()?;
    let data = prepare_data(docs, cfg)?;
    let input_dim = docs[0].dim();
    let seeds = cfg.seeds();
    let test = &data.test;

    let mut rows = Vec::new();
    let mut logs = BTreeMap::new();
    let mut ensembles: BTreeMap<BenchRow, SpecialistEnsemble> = BTreeMap::new();
    for &row in &cfg.rows {
        let (preds, params) = match row {
            BenchRow::Random => {
                let s = seeds.split("random");
                (predict_all(test, |i| Ok(order_random(i.len(), s.split(&i.doc_id))))?, 0)
            }
            BenchRow::GreedyNn => {
                let s = seeds.split("greedy");
                (predict_all(test, |i| Ok(order_greedy_nn(i.pages(), s.split(&i.doc_id))))?, 0)
            }
            BenchRow::TspNn => (predict_all(test, |i| Ok(order_tsp_nn(i.pages())))?, 0),
            BenchRow::SpecializedDirect | BenchRow::SpecializedCurriculum => {
                let ens = ensemble(row, &data, cfg, input_dim)?;
                let preds = predict_all(test, |i| Ok(ens.order(i)?))?;
                let params = ens.num_params();
                ensembles.insert(row, ens);
                (preds, params)
            }
            _ => {
                let (model, log) = single_model(row, &data, cfg, input_dim)?;
                logs.insert(row.key().to_string(), log);
                (predict_all(test, |i| Ok(model.order(i)?))?, model.num_params())
            }
        };
        let r = summarise(row, test, &preds, params)?;
        log::info!("{}: overall τ {:.4}", r.name, r.overall);
        rows.push(r);
    }

    let stability = stability_rows(&logs)?;
    let locality = match ensembles
        .get(&BenchRow::SpecializedDirect)
        .or_else(|| ensembles.get(&BenchRow::SpecializedCurriculum))
    {
        Some(ens) => {
            locality_experiment(ens.get(LengthBucket::B2_5), ens.get(LengthBucket::B21_25), test, cfg.locality_window)?
        }
        None => None,
    };
    let transfer = if cfg.run_transfer { Some(transfer_experiment(&data, cfg, input_dim)?) } else { None };

    let hist = LengthBucket::ALL.map(|b| test.iter().filter(|i| i.bucket() == b).count());
    let meta = ReportMeta {
        corpus_digest: corpus_digest(docs),
        config_digest: cfg.digest(),
        seed: cfg.seed,
        n_test_docs: test.len(),
        test_docs_per_bucket: hist,
    };
    let timestamp = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
    Ok(BenchOutput { report: EvalReport { rows, meta, timestamp }, logs, stability, locality, transfer })
}
