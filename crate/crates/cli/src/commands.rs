use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;
use pageorder::bench::{
    self, emit_figures, parse_report_csv, prepare_data, run_benchmark, transfer_experiment, write_outputs, BenchRow,
    EvalReport, ReportMeta, REFERENCE_TRANSFER, REPORT_CSV,
};
use pageorder::corpus::{
    bucket_histogram, generate_corpus, load_corpus, save_corpus, Credentials, Document, EmbedClient, LengthBucket,
    REFERENCE_LENGTH_WEIGHTS,
};
use pageorder::metrics::TauSummary;
use pageorder::models::{save_checkpoint, Arch, Model, PeVariant};
use pageorder::numcore::GradCheckOptions;
use pageorder::training::{
    evaluate, fit_from, gradient_gate, load_train_state, parse_epoch_log, save_train_state, write_epoch_log, Strategy,
};
use pageorder::util::{sha256_hex, write_atomic};
use serde::Deserialize;

use crate::config::{usage, RunConfig};
use crate::{GlobalArgs, TrainArgs};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const CONFIG_ECHO: &str = "config.toml";

/// Config file plus flag overrides, with the output directory resolved.
struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

fn setup(global: &GlobalArgs, corpus_seed: bool) -> anyhow::Result<Run> {
    if let Some(jobs) = global.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let mut cfg = RunConfig::load(global.config.as_deref())?;
    if let Some(seed) = global.seed {
        if corpus_seed {
            cfg.corpus.seed = seed;
        } else {
            cfg.bench.seed = seed;
        }
    }
    if let Some(out) = &global.out {
        cfg.out = Some(out.clone());
    }
    if let Some(path) = &global.corpus {
        cfg.corpus_path = Some(path.clone());
    }
    if let Some(list) = &global.models {
        cfg.bench.rows = parse_rows(list)?;
    }
    let out = cfg.out.clone().ok_or_else(|| usage("no output directory; pass --out or set `out` in the config"))?;
    Ok(Run { cfg, out })
}

fn parse_rows(list: &str) -> anyhow::Result<Vec<BenchRow>> {
    if list.trim().eq_ignore_ascii_case("all") {
        return Ok(BenchRow::ALL.to_vec());
    }
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| BenchRow::parse(s).ok_or_else(|| usage(format!("unknown model row {s:?}"))))
        .collect()
}

/// Creates the output directory and writes the effective configuration into it.
fn echo_config(run: &Run) -> anyhow::Result<()> {
    fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    write_atomic(&run.out.join(CONFIG_ECHO), run.cfg.to_toml()?.as_bytes())?;
    Ok(())
}

fn load_docs(cfg: &RunConfig) -> anyhow::Result<Vec<Document>> {
    match &cfg.corpus_path {
        Some(p) => load_corpus(p).with_context(|| format!("loading corpus {}", p.display())),
        None => {
            info!("generating {} synthetic documents (seed {})", cfg.corpus.n_docs, cfg.corpus.seed);
            Ok(generate_corpus(&cfg.corpus)?)
        }
    }
}

fn input_dim(docs: &[Document]) -> anyhow::Result<usize> {
    docs.first().map(Document::dim).ok_or_else(|| usage("corpus is empty"))
}

fn summary_line(s: &TauSummary) -> String {
    let mut line = format!("overall {:.4} ({} docs)", s.overall, s.count);
    for (b, m) in &s.per_bucket {
        let _ = write!(line, "  {} {:.4} (n={})", b.label(), m.mean, m.count);
    }
    line
}

pub fn gen(global: &GlobalArgs) -> anyhow::Result<()> {
    let run = setup(global, true)?;
    echo_config(&run)?;
    let docs = generate_corpus(&run.cfg.corpus)?;
    let path = run.out.join(CORPUS_FILE);
    save_corpus(&docs, &path)?;
    let digest = sha256_hex(&fs::read(&path)?);

    let hist = bucket_histogram(&docs);
    let ref_total: f64 = REFERENCE_LENGTH_WEIGHTS.iter().sum();
    println!("{:<8} {:>6} {:>8} {:>10}", "bucket", "docs", "share", "reference");
    for (k, b) in LengthBucket::ALL.iter().enumerate() {
        let share = 100.0 * hist[k] as f64 / docs.len() as f64;
        let reference = 100.0 * REFERENCE_LENGTH_WEIGHTS[k] / ref_total;
        println!("{:<8} {:>6} {:>7.1}% {:>9.1}%", b.label(), hist[k], share, reference);
    }
    println!("wrote {} documents to {}", docs.len(), path.display());
    println!("sha256 {digest}");
    Ok(())
}

pub fn train(global: &GlobalArgs, args: &TrainArgs) -> anyhow::Result<()> {
    let mut run = setup(global, false)?;
    let t = &mut run.cfg.train;
    if let Some(a) = &args.arch {
        t.arch = Arch::parse(a).ok_or_else(|| usage(format!("unknown architecture {a:?}")))?;
    }
    if let Some(s) = &args.strategy {
        t.strategy = Strategy::parse(s).ok_or_else(|| usage(format!("unknown strategy {s:?}")))?;
    }
    if let Some(b) = &args.target {
        t.target_bucket = Some(LengthBucket::parse(b).ok_or_else(|| usage(format!("unknown length bucket {b:?}")))?);
    }
    if let Some(p) = &args.pe {
        t.pe_variant = match p.to_ascii_lowercase().as_str() {
            "learned" => PeVariant::Learned,
            "sinusoidal" => PeVariant::Sinusoidal,
            "none" => PeVariant::None,
            _ => return Err(usage(format!("unknown positional encoding {p:?}"))),
        };
    }
    let section = run.cfg.train.clone();
    const KEY: &str = "train";
    let mut tcfg = run.cfg.bench.train_config(KEY);
    tcfg.strategy = section.strategy;
    tcfg.target_bucket = section.target_bucket;
    tcfg.validate()?;
    run.cfg.bench.validate()?;
    echo_config(&run)?;

    let docs = load_docs(&run.cfg)?;
    let data = prepare_data(&docs, &run.cfg.bench)?;
    let (mut model, resume) = match &args.resume {
        Some(path) => {
            let (model, state, seed) =
                load_train_state(path).with_context(|| format!("loading training state {}", path.display()))?;
            info!("resuming after epoch {} from {}", state.epochs_done, path.display());
            tcfg.seed = seed;
            (model, Some(state))
        }
        None => {
            let mcfg = run.cfg.bench.model_config(section.arch, section.pe_variant, input_dim(&docs)?, KEY);
            (Model::new(mcfg)?, None)
        }
    };
    info!("training {:?} ({} parameters) for {} epochs", model.arch(), model.num_params(), tcfg.epochs);
    let (result, state) = fit_from(&mut model, &data.splits.train, &data.val, &tcfg, resume)?;

    save_checkpoint(&model, tcfg.seed, &run.out.join("model.ckpt"))?;
    save_train_state(&model, &state, tcfg.seed, &run.out.join("train_state.ckpt"))?;
    write_epoch_log(&result.log, &run.out.join("epoch_log.csv"))?;
    let (test, _) = evaluate(&model, &data.test)?;
    println!("best epoch {} (val tau {:.4})", result.best_epoch, result.best_tau);
    println!("test tau {}", summary_line(&test));
    Ok(())
}

pub fn bench(global: &GlobalArgs) -> anyhow::Result<()> {
    let run = setup(global, false)?;
    run.cfg.bench.validate()?;
    echo_config(&run)?;
    let docs = load_docs(&run.cfg)?;
    let out = run_benchmark(&docs, &run.cfg.bench)?;
    let written = write_outputs(&out, &run.out)?;
    print!("{}", bench::render_report_text(&out.report));
    info!("wrote {} files to {}", written.len(), run.out.display());
    Ok(())
}

/// Rebuilds the figure files from the report, its metadata and the epoch logs in `--out`.
pub fn figures(global: &GlobalArgs) -> anyhow::Result<()> {
    let run = setup(global, false)?;
    let dir = &run.out;
    let read = |name: &str| {
        fs::read_to_string(dir.join(name)).with_context(|| format!("reading {}", dir.join(name).display()))
    };
    let rows = parse_report_csv(&read(REPORT_CSV)?)?;
    let meta: ReportMeta = serde_json::from_str(&read("report_meta.json")?).context("parsing report_meta.json")?;
    let mut logs = BTreeMap::new();
    let log_dir = dir.join("logs");
    if log_dir.is_dir() {
        let mut entries: Vec<PathBuf> =
            fs::read_dir(&log_dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for p in entries.into_iter().filter(|p| p.extension().is_some_and(|e| e == "csv")) {
            let key = p.file_stem().and_then(|s| s.to_str()).context("log file name is not UTF-8")?.to_string();
            let text = fs::read_to_string(&p)?;
            logs.insert(key, parse_epoch_log(&text).with_context(|| format!("parsing {}", p.display()))?);
        }
    }
    let report = EvalReport { rows, meta, timestamp: 0 };
    for p in emit_figures(&report, &logs, dir)? {
        println!("{}", p.display());
    }
    Ok(())
}

pub fn gradcheck(global: &GlobalArgs) -> anyhow::Result<()> {
    if let Some(jobs) = global.jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
    }
    let results = gradient_gate(GradCheckOptions::default())?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<32} {:>5} entries  max rel err {:.2e}  {verdict}",
            r.name,
            r.report.entries.len(),
            r.report.max_rel_error()
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", results.len());
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

pub fn transfer(global: &GlobalArgs) -> anyhow::Result<()> {
    let run = setup(global, false)?;
    run.cfg.bench.validate()?;
    echo_config(&run)?;
    let docs = load_docs(&run.cfg)?;
    let data = prepare_data(&docs, &run.cfg.bench)?;
    let r = transfer_experiment(&data, &run.cfg.bench, input_dim(&docs)?)?;
    let (p_in, p_tr) = REFERENCE_TRANSFER;
    let body = format!(
        "tau_in_domain,tau_transfer,docs_in_domain,docs_transfer,reference_tau_in_domain,reference_tau_transfer\n{},{},{},{},{p_in},{p_tr}\n",
        r.tau_in_domain, r.tau_transfer, r.in_domain_docs, r.transfer_docs
    );
    write_atomic(&run.out.join("transfer.csv"), body.as_bytes())?;
    write_epoch_log(&r.log, &run.out.join("transfer_log.csv"))?;
    println!("2-5 pages (in domain): tau {:.4} over {} docs", r.tau_in_domain, r.in_domain_docs);
    println!("21-25 pages (transfer): tau {:.4} over {} docs", r.tau_transfer, r.transfer_docs);
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TextDoc {
    doc_id: String,
    pages: Vec<String>,
}

fn read_text_docs(path: &Path) -> anyhow::Result<Vec<TextDoc>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut docs = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: TextDoc = serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Embeds every page of a JSON Lines text corpus and saves the vectors as a corpus file.
pub fn embed(global: &GlobalArgs) -> anyhow::Result<()> {
    let credentials = Credentials::from_env()?;
    let run = setup(global, false)?;
    let e = &run.cfg.embed;
    let input = e.input.clone().ok_or_else(|| usage("no input texts; set `embed.input` in the config"))?;
    echo_config(&run)?;
    let texts = read_text_docs(&input)?;
    let flat: Vec<String> = texts.iter().flat_map(|d| d.pages.iter().cloned()).collect();
    info!("embedding {} pages from {} documents via {}", flat.len(), texts.len(), e.endpoint);
    let client = EmbedClient::new(&e.endpoint, credentials, e.dim).with_batch_size(e.batch_size);
    let mut vectors = client.fetch(&flat)?.into_iter();
    let docs = texts
        .into_iter()
        .map(|d| {
            let pages = vectors.by_ref().take(d.pages.len()).collect();
            Document::new(d.doc_id, pages)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let path = run.out.join(CORPUS_FILE);
    save_corpus(&docs, &path)?;
    println!("wrote {} documents to {}", docs.len(), path.display());
    Ok(())
}
