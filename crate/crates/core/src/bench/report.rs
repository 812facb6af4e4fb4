use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::experiments::{REFERENCE_LOCALITY, REFERENCE_TRANSFER};
use super::figures::{emit_figures, opt, parse_opt, records};
use super::{BenchError, BenchOutput, EvalReport, ReportRow};
use crate::corpus::LengthBucket;
use crate::training::write_epoch_log;
use crate::util::write_atomic;

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

fn header() -> String {
    let labels: Vec<String> = LengthBucket::ALL.iter().map(|b| b.label()).collect();
    let cols = |prefix: &str| labels.iter().map(|l| format!("{prefix}{l}")).collect::<Vec<_>>().join(",");
    format!(
        "model_key,model,{},overall,params,{},{},reference_params",
        cols("tau_"),
        cols("docs_"),
        cols("reference_tau_")
    )
}

pub fn render_report_csv(report: &EvalReport) -> String {
    let mut s = header();
    s.push('\n');
    for r in &report.rows {
        let taus: Vec<String> = r.per_bucket.iter().map(|&t| opt(t)).collect();
        let docs: Vec<String> = r.docs.iter().map(usize::to_string).collect();
        let reference: Vec<String> = r.reference.iter().map(|p| format!("{p}")).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.key,
            r.name,
            taus.join(","),
            r.overall,
            r.params,
            docs.join(","),
            reference.join(","),
            r.reference_params
        );
    }
    s
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>, BenchError> {
    let bad = |m: String| BenchError::Parse { file: REPORT_CSV.into(), message: m };
    records(text, &header(), REPORT_CSV)?
        .into_iter()
        .map(|f| {
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad count {s:?}")));
            let mut per_bucket = [None; 5];
            let mut docs = [0; 5];
            let mut reference = [0.0; 5];
            for k in 0..5 {
                per_bucket[k] = parse_opt(f[2 + k], REPORT_CSV)?;
                docs[k] = int(f[9 + k])?;
                reference[k] = num(f[14 + k])?;
            }
            Ok(ReportRow {
                key: f[0].into(),
                name: f[1].into(),
                per_bucket,
                overall: num(f[7])?,
                params: int(f[8])?,
                docs,
                reference,
                reference_params: f[19].into(),
            })
        })
        .collect()
}

fn fixed(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

/// Aligned plain-text table with the published numbers beside each row.
pub fn render_report_text(report: &EvalReport) -> String {
    let mut head: Vec<String> = vec!["Model".into()];
    head.extend(LengthBucket::ALL.iter().map(|b| b.label()));
    head.extend(["Overall".into(), "Params".into(), "| Ref".into()]);
    head.extend(LengthBucket::ALL.iter().map(|b| b.label()));
    head.push("Ref params".into());
    let mut table = vec![head];
    for r in &report.rows {
        let mut line = vec![r.name.clone()];
        line.extend(r.per_bucket.iter().map(|&t| fixed(t)));
        line.extend([format!("{:.3}", r.overall), r.params.to_string(), "|".into()]);
        line.extend(r.reference.iter().map(|&p| format!("{p:.3}")));
        line.push(r.reference_params.clone());
        table.push(line);
    }
    let widths: Vec<usize> =
        (0..table[0].len()).map(|c| table.iter().map(|l| l[c].chars().count()).max().unwrap_or(0)).collect();
    let mut s = String::new();
    for line in &table {
        let cells: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(s, "{}", cells.join("  ").trim_end());
    }
    let m = &report.meta;
    let _ =
        writeln!(s, "\nTest documents: {} (per bucket {:?}); seed {}", m.n_test_docs, m.test_docs_per_bucket, m.seed);
    let _ = writeln!(s, "Reference columns come from a different, private corpus and are not expected to match.");
    s
}

/// Writes every report, figure, analysis and log file into `dir`.
pub fn write_outputs(out: &BenchOutput, dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<(), BenchError> {
        let p = dir.join(name);
        write_atomic(&p, body.as_bytes())?;
        written.push(p);
        Ok(())
    };
    put(REPORT_CSV, render_report_csv(&out.report))?;
    put(REPORT_TXT, render_report_text(&out.report))?;
    put("report_meta.json", serde_json::to_string_pretty(&out.report.meta).expect("meta serialises") + "\n")?;
    let manifest = serde_json::json!({
        "timestamp_unix": out.report.timestamp,
        "config_digest": out.report.meta.config_digest,
        "corpus_digest": out.report.meta.corpus_digest,
        "version": env!("CARGO_PKG_VERSION"),
    });
    put("run_manifest.json", serde_json::to_string_pretty(&manifest).expect("json") + "\n")?;

    let mut st = String::from("variant,sigma,epochs,negative_epochs,worse_than_random,reference_sigma\n");
    for r in &out.stability {
        let neg: Vec<String> = r.negative_epochs.iter().map(usize::to_string).collect();
        let _ = writeln!(
            st,
            "{},{},{},{},{},{}",
            r.variant.label(),
            r.sigma,
            r.epochs,
            neg.join(" "),
            !r.negative_epochs.is_empty(),
            r.reference_sigma
        );
    }
    put("stability.csv", st)?;

    let mut loc = String::from(
        "local_fraction_short,avg_dist_short,local_fraction_long,avg_dist_long,ratio,docs_short,docs_long,\
         reference_local_fraction_short,reference_avg_dist_short,reference_local_fraction_long,reference_avg_dist_long,reference_ratio\n",
    );
    if let Some(l) = &out.locality {
        let p = REFERENCE_LOCALITY;
        let _ = writeln!(
            loc,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            l.short.local_fraction,
            l.short.avg_distance,
            l.long.local_fraction,
            l.long.avg_distance,
            l.ratio,
            l.short_docs,
            l.long_docs,
            p[0],
            p[1],
            p[2],
            p[3],
            p[4]
        );
    }
    put("locality.csv", loc)?;

    let mut tr = String::from(
        "tau_in_domain,tau_transfer,docs_in_domain,docs_transfer,reference_tau_in_domain,reference_tau_transfer\n",
    );
    if let Some(t) = &out.transfer {
        let _ = writeln!(
            tr,
            "{},{},{},{},{},{}",
            t.tau_in_domain,
            t.tau_transfer,
            t.in_domain_docs,
            t.transfer_docs,
            REFERENCE_TRANSFER.0,
            REFERENCE_TRANSFER.1
        );
    }
    put("transfer.csv", tr)?;

    written.extend(emit_figures(&out.report, &out.logs, dir)?);
    for (key, log) in &out.logs {
        let p = dir.join("logs").join(format!("{key}.csv"));
        write_epoch_log(log, &p)?;
        written.push(p);
    }
    Ok(written)
}
