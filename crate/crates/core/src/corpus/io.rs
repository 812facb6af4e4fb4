//! JSON Lines corpus files: one `{"doc_id", "dim", "pages"}` object per line,
//! pages in true order.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Document, Embedding};
use crate::util::write_atomic;

#[derive(Serialize)]
struct DocOut<'a> {
    doc_id: &'a str,
    dim: usize,
    pages: &'a [Embedding],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocIn {
    doc_id: String,
    dim: usize,
    pages: Vec<Vec<f32>>,
}

pub fn save_corpus(docs: &[Document], path: &Path) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    for d in docs {
        let rec = DocOut { doc_id: &d.doc_id, dim: d.dim(), pages: d.pages() };
        serde_json::to_writer(&mut buf, &rec).map_err(std::io::Error::other)?;
        buf.write_all(b"\n")?;
    }
    write_atomic(path, &buf)?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut docs = Vec::new();
    let mut corpus_dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocIn =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse { line: line_no, message: e.to_string() })?;
        let format = |message: String| CorpusError::Format { line: line_no, message };
        if let Some(bad) = rec.pages.iter().position(|p| p.len() != rec.dim) {
            return Err(format(format!("page {bad} has {} values, header says dim {}", rec.pages[bad].len(), rec.dim)));
        }
        match corpus_dim {
            None => corpus_dim = Some(rec.dim),
            Some(d) if d != rec.dim => return Err(format(format!("dim {} differs from corpus dim {d}", rec.dim))),
            Some(_) => {}
        }
        let pages = rec
            .pages
            .into_iter()
            .map(Embedding::new)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format(e.to_string()))?;
        docs.push(Document::new(rec.doc_id, pages).map_err(|e| format(e.to_string()))?);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let docs = generate_corpus(&CorpusConfig { n_docs: 25, ..Default::default() }).unwrap();
        save_corpus(&docs, &path).unwrap();
        let back = load_corpus(&path).unwrap();
        assert_eq!(back.len(), docs.len());
        for (a, b) in docs.iter().zip(&back) {
            assert_eq!(a.doc_id, b.doc_id);
            for (p, q) in a.pages().iter().zip(b.pages()) {
                let pb: Vec<u32> = p.values().iter().map(|x| x.to_bits()).collect();
                let qb: Vec<u32> = q.values().iter().map(|x| x.to_bits()).collect();
                assert_eq!(pb, qb);
            }
        }
    }

    #[test]
    fn truncated_line_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let ok = r#"{"doc_id":"a","dim":2,"pages":[[1,2],[3,4]]}"#;
        fs::write(&path, format!("{ok}\n{}\n", &ok[..20])).unwrap();
        match load_corpus(&path) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn dimension_mismatch_across_docs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let a = r#"{"doc_id":"a","dim":2,"pages":[[1,2],[3,4]]}"#;
        let b = r#"{"doc_id":"b","dim":3,"pages":[[1,2,3],[3,4,5]]}"#;
        fs::write(&path, format!("{a}\n{b}\n")).unwrap();
        assert!(matches!(load_corpus(&path), Err(CorpusError::Format { line: 2, .. })));
        let c = r#"{"doc_id":"c","dim":2,"pages":[[1,2],[3]]}"#;
        fs::write(&path, format!("{c}\n")).unwrap();
        assert!(matches!(load_corpus(&path), Err(CorpusError::Format { line: 1, .. })));
    }
}
