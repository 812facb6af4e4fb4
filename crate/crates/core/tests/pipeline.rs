use pageorder::bench::{prepare_data, BenchConfig};
use pageorder::corpus::{generate_corpus, load_corpus, save_corpus, CorpusConfig, Document};
use pageorder::models::{load_checkpoint, save_checkpoint, Arch, Model, ModelConfig};
use pageorder::training::{evaluate, fit, TrainConfig};

fn corpus() -> Vec<Document> {
    generate_corpus(&CorpusConfig { n_docs: 120, dim: 12, chrono_dim: 4, ..Default::default() }).unwrap()
}

#[test]
fn corpus_file_round_trips() {
    let docs = corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    save_corpus(&docs, &path).unwrap();
    assert_eq!(load_corpus(&path).unwrap(), docs);
}

#[test]
fn trained_model_survives_a_checkpoint() {
    let docs = corpus();
    let cfg = BenchConfig::default();
    let data = prepare_data(&docs, &cfg).unwrap();
    let mut model =
        Model::new(ModelConfig { hidden_dim: 16, layers: 1, ..ModelConfig::desk(Arch::PairwiseRank, 12, 3) }).unwrap();
    let tcfg = TrainConfig { epochs: 3, batch_size: 8, seed: 5, ..Default::default() };
    let result = fit(&mut model, &data.splits.train, &data.val, &tcfg).unwrap();
    assert_eq!(result.log.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, tcfg.seed, &path).unwrap();
    let (loaded, seed) = load_checkpoint(&path).unwrap();
    assert_eq!(seed, 5);
    let (a, oa) = evaluate(&model, &data.test).unwrap();
    let (b, ob) = evaluate(&loaded, &data.test).unwrap();
    assert_eq!(oa, ob);
    assert_eq!(a.overall, b.overall);
    assert!((-1.0..=1.0).contains(&a.overall));
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let docs = corpus();
    let data = prepare_data(&docs, &BenchConfig::default()).unwrap();
    let run = || {
        let mut m = Model::new(ModelConfig { hidden_dim: 8, ..ModelConfig::desk(Arch::PointerMlp, 12, 9) }).unwrap();
        fit(&mut m, &data.splits.train, &data.val, &TrainConfig { epochs: 2, batch_size: 4, ..Default::default() })
            .unwrap()
            .log
    };
    assert_eq!(run(), run());
}
