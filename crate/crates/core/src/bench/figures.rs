use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{BenchError, BenchRow, EvalReport};
use crate::corpus::LengthBucket;
use crate::models::PeVariant;
use crate::training::EpochRecord;
use crate::util::write_atomic;

pub const FIG1_FILE: &str = "fig1_tau_by_length.csv";
pub const FIG2_FILE: &str = "fig2_short_vs_long.csv";
pub const FIG3_FILE: &str = "fig3_pe_ablation.csv";
pub const FIG4_FILE: &str = "fig4_validation_curves.csv";

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

pub(crate) fn parse_opt(s: &str, file: &str) -> Result<Option<f64>, BenchError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| BenchError::Parse { file: file.into(), message: format!("bad number {s:?}") })
}

/// Data lines split on commas, after checking the header.
pub(crate) fn records<'a>(text: &'a str, header: &str, file: &str) -> Result<Vec<Vec<&'a str>>, BenchError> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(BenchError::Parse { file: file.into(), message: "unexpected header".into() });
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .map(|(k, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != width {
                return Err(BenchError::Parse {
                    file: file.into(),
                    message: format!("line {} has {} fields", k + 2, f.len()),
                });
            }
            Ok(f)
        })
        .collect()
}

const FIG1_HEADER: &str = "model_key,model,bucket,tau";
const FIG2_HEADER: &str = "model_key,model,tau_short,tau_long,below_diagonal";
const FIG3_HEADER: &str = "variant,bucket,tau,relative_to_learned";
const FIG4_HEADER: &str = "variant,epoch,val_tau";

fn fig1(report: &EvalReport) -> String {
    let mut s = format!("{FIG1_HEADER}\n");
    for r in &report.rows {
        for (b, t) in LengthBucket::ALL.iter().zip(r.per_bucket) {
            let _ = writeln!(s, "{},{},{},{}", r.key, r.name, b.label(), opt(t));
        }
    }
    s
}

/// Per model: (key, name, τ per bucket).
pub fn parse_fig1(text: &str) -> Result<Vec<(String, String, [Option<f64>; 5])>, BenchError> {
    let mut out: Vec<(String, String, [Option<f64>; 5])> = Vec::new();
    for f in records(text, FIG1_HEADER, FIG1_FILE)? {
        let b = LengthBucket::parse(f[2])
            .ok_or_else(|| BenchError::Parse { file: FIG1_FILE.into(), message: format!("bad bucket {}", f[2]) })?;
        if out.last().is_none_or(|l| l.0 != f[0]) {
            out.push((f[0].to_string(), f[1].to_string(), [None; 5]));
        }
        out.last_mut().expect("pushed").2[b.index()] = parse_opt(f[3], FIG1_FILE)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fig2Row {
    pub key: String,
    pub name: String,
    pub tau_short: Option<f64>,
    pub tau_long: Option<f64>,
    /// Long-document τ under short-document τ; absent when either is missing.
    pub below_diagonal: Option<bool>,
}

fn fig2(report: &EvalReport) -> String {
    let mut s = format!("{FIG2_HEADER}\n");
    for r in &report.rows {
        let (short, long) = (r.per_bucket[0], r.per_bucket[4]);
        let below = short.zip(long).map(|(a, b)| b < a);
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.key,
            r.name,
            opt(short),
            opt(long),
            below.map_or(String::new(), |b| b.to_string())
        );
    }
    s
}

pub fn parse_fig2(text: &str) -> Result<Vec<Fig2Row>, BenchError> {
    records(text, FIG2_HEADER, FIG2_FILE)?
        .into_iter()
        .map(|f| {
            let below = match f[4] {
                "" => None,
                "true" => Some(true),
                "false" => Some(false),
                other => {
                    return Err(BenchError::Parse { file: FIG2_FILE.into(), message: format!("bad flag {other}") })
                }
            };
            Ok(Fig2Row {
                key: f[0].into(),
                name: f[1].into(),
                tau_short: parse_opt(f[2], FIG2_FILE)?,
                tau_long: parse_opt(f[3], FIG2_FILE)?,
                below_diagonal: below,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fig3Row {
    pub variant: String,
    /// Bucket label or `overall`.
    pub bucket: String,
    pub tau: Option<f64>,
    /// (τ − τ_learned) / |τ_learned|; absent when either side is missing or τ_learned is 0.
    pub relative_to_learned: Option<f64>,
}

fn fig3(report: &EvalReport) -> String {
    let mut s = format!("{FIG3_HEADER}\n");
    let cells = |row: BenchRow| -> Option<Vec<Option<f64>>> {
        report.row(row.key()).map(|r| r.per_bucket.iter().copied().chain([Some(r.overall)]).collect())
    };
    let learned = cells(BenchRow::Seq2seqLearned);
    let labels: Vec<String> = LengthBucket::ALL.iter().map(|b| b.label()).chain(["overall".to_string()]).collect();
    for row in [BenchRow::Seq2seqLearned, BenchRow::Seq2seqSinusoidal, BenchRow::Seq2seqNone] {
        let Some(v) = cells(row) else { continue };
        let variant = row.pe_variant().expect("seq2seq row").label();
        for (k, label) in labels.iter().enumerate() {
            let rel = match (v[k], learned.as_ref().and_then(|l| l[k])) {
                (Some(t), Some(base)) if base != 0.0 => Some((t - base) / base.abs()),
                _ => None,
            };
            // The learned row is its own baseline.
            let rel = if row == BenchRow::Seq2seqLearned && v[k].is_some() { Some(0.0) } else { rel };
            let _ = writeln!(s, "{variant},{label},{},{}", opt(v[k]), opt(rel));
        }
    }
    s
}

pub fn parse_fig3(text: &str) -> Result<Vec<Fig3Row>, BenchError> {
    records(text, FIG3_HEADER, FIG3_FILE)?
        .into_iter()
        .map(|f| {
            Ok(Fig3Row {
                variant: f[0].into(),
                bucket: f[1].into(),
                tau: parse_opt(f[2], FIG3_FILE)?,
                relative_to_learned: parse_opt(f[3], FIG3_FILE)?,
            })
        })
        .collect()
}

fn fig4(logs: &BTreeMap<String, Vec<EpochRecord>>) -> String {
    let mut s = format!("{FIG4_HEADER}\n");
    for row in [BenchRow::Seq2seqLearned, BenchRow::Seq2seqSinusoidal, BenchRow::Seq2seqNone] {
        let Some(log) = logs.get(row.key()) else { continue };
        let variant = row.pe_variant().expect("seq2seq row").label();
        for r in log {
            let _ = writeln!(s, "{variant},{},{}", r.epoch, r.val_tau);
        }
    }
    s
}

/// (variant, epoch, validation τ) triples.
pub fn parse_fig4(text: &str) -> Result<Vec<(PeVariant, usize, f64)>, BenchError> {
    let bad = |m: String| BenchError::Parse { file: FIG4_FILE.into(), message: m };
    records(text, FIG4_HEADER, FIG4_FILE)?
        .into_iter()
        .map(|f| {
            let v = PeVariant::ALL
                .into_iter()
                .find(|v| v.label() == f[0])
                .ok_or_else(|| bad(format!("bad variant {}", f[0])))?;
            let e = f[1].parse().map_err(|_| bad(format!("bad epoch {}", f[1])))?;
            let t = parse_opt(f[2], FIG4_FILE)?.ok_or_else(|| bad("missing τ".into()))?;
            Ok((v, e, t))
        })
        .collect()
}

/// Writes the four figure-data files into `out_dir` and returns their paths.
pub fn emit_figures(
    report: &EvalReport,
    logs: &BTreeMap<String, Vec<EpochRecord>>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, BenchError> {
    let files =
        [(FIG1_FILE, fig1(report)), (FIG2_FILE, fig2(report)), (FIG3_FILE, fig3(report)), (FIG4_FILE, fig4(logs))];
    let mut paths = Vec::new();
    for (name, body) in files {
        let p = out_dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{ReportMeta, ReportRow};

    fn row(r: BenchRow, taus: [Option<f64>; 5], overall: f64) -> ReportRow {
        ReportRow {
            key: r.key().into(),
            name: r.name().into(),
            per_bucket: taus,
            overall,
            params: 10,
            docs: [1; 5],
            reference: r.reference().taus,
            reference_params: r.reference().params.into(),
        }
    }

    fn report() -> EvalReport {
        EvalReport {
            rows: vec![
                row(BenchRow::Random, [Some(0.1), None, Some(-0.2), Some(1.0 / 3.0), Some(0.0)], 0.01),
                row(BenchRow::Seq2seqLearned, [Some(0.8), Some(0.5), Some(0.4), Some(0.2), Some(0.1)], 0.5),
                row(BenchRow::Seq2seqNone, [Some(0.9), Some(0.25), Some(0.4), Some(0.3), Some(0.3)], 0.4),
            ],
            meta: ReportMeta {
                corpus_digest: "c".into(),
                config_digest: "d".into(),
                seed: 1,
                n_test_docs: 5,
                test_docs_per_bucket: [1; 5],
            },
            timestamp: 0,
        }
    }

    #[test]
    fn fig1_round_trips() {
        let rep = report();
        let parsed = parse_fig1(&fig1(&rep)).unwrap();
        assert_eq!(parsed.len(), rep.rows.len());
        for (p, r) in parsed.iter().zip(&rep.rows) {
            assert_eq!((&p.0, &p.1, p.2), (&r.key, &r.name, r.per_bucket));
        }
    }

    #[test]
    fn fig2_flags_models_that_fail_to_scale() {
        let rows = parse_fig2(&fig2(&report())).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].below_diagonal, Some(true));
        assert_eq!(rows[1].tau_short, Some(0.8));
        assert_eq!(rows[1].below_diagonal, Some(true));
        let rep = EvalReport { rows: vec![row(BenchRow::TspNn, [None, None, None, None, Some(0.2)], 0.2)], ..report() };
        assert_eq!(parse_fig2(&fig2(&rep)).unwrap()[0].below_diagonal, None);
    }

    #[test]
    fn fig3_relative_columns() {
        let rows = parse_fig3(&fig3(&report())).unwrap();
        assert_eq!(rows.len(), 12);
        assert!(rows[..6].iter().all(|r| r.variant == "learned" && r.relative_to_learned == Some(0.0)));
        let none_b1 = &rows[7];
        assert_eq!(none_b1.bucket, "6-10");
        assert_eq!(none_b1.relative_to_learned, Some(-0.5));
        assert_eq!(rows[11].bucket, "overall");
        assert_eq!(rows[11].tau, Some(0.4));
    }

    #[test]
    fn fig4_round_trips() {
        let rec = |e, t| EpochRecord {
            epoch: e,
            stage: "all".into(),
            train_loss: 0.1,
            val_tau: t,
            val_per_bucket: [None; 5],
        };
        let mut logs = BTreeMap::new();
        logs.insert("seq2seq_sinusoidal".into(), vec![rec(0, 0.1), rec(1, 0.30000000000000004)]);
        logs.insert("pairwise".into(), vec![rec(0, 0.9)]);
        let parsed = parse_fig4(&fig4(&logs)).unwrap();
        assert_eq!(parsed, vec![(PeVariant::Sinusoidal, 0, 0.1), (PeVariant::Sinusoidal, 1, 0.30000000000000004)]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(parse_fig1("wrong header\n").is_err());
        assert!(parse_fig2(&format!("{FIG2_HEADER}\na,b,0.1,0.2,maybe\n")).is_err());
        assert!(parse_fig3(&format!("{FIG3_HEADER}\na,b,x,\n")).is_err());
    }
}
