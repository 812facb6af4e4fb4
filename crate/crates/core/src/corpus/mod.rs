//! Documents, shuffled instances, length buckets, and the synthetic generator.

mod embed_client;
mod generate;
mod io;

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{SeedStream, Tensor};

pub use embed_client::{fetch_embeddings, Credentials, EmbedClient, EmbedError, EMBED_API_KEY_VAR};
pub use generate::{generate_corpus, CorpusConfig, REFERENCE_LENGTH_WEIGHTS};
pub use io::{load_corpus, save_corpus};

/// Longest supported document.
pub const MAX_PAGES: usize = 25;
/// Shortest orderable document.
pub const MIN_PAGES: usize = 2;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error("invalid document: {0}")]
    Document(String),
    #[error("page count {0} is outside 2..=25")]
    LengthOutOfRange(usize),
    #[error("cannot split {0} documents into three non-empty parts")]
    Split(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One page's content vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self, CorpusError> {
        if values.is_empty() {
            return Err(CorpusError::Document("embedding has no dimensions".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CorpusError::Document("embedding holds a non-finite value".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Pages in their true chronological order.
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pages: Vec<Embedding>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, pages: Vec<Embedding>) -> Result<Self, CorpusError> {
        let n = pages.len();
        if !(MIN_PAGES..=MAX_PAGES).contains(&n) {
            return Err(CorpusError::LengthOutOfRange(n));
        }
        let d = pages[0].dim();
        if pages.iter().any(|p| p.dim() != d) {
            return Err(CorpusError::Document("pages differ in dimension".into()));
        }
        Ok(Self { doc_id: doc_id.into(), pages })
    }

    pub fn pages(&self) -> &[Embedding] {
        &self.pages
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.pages[0].dim()
    }

    pub fn bucket(&self) -> LengthBucket {
        bucket_of(self.len()).expect("document lengths are validated on construction")
    }
}

/// A document whose pages sit in shuffled slots.
///
/// `truth_rank[k]` is the chronological rank of the page in slot `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShuffledInstance {
    pub doc_id: String,
    pages: Vec<Embedding>,
    truth_rank: Vec<usize>,
}

pub fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    for &x in p {
        if x >= p.len() || seen[x] {
            return false;
        }
        seen[x] = true;
    }
    true
}

impl ShuffledInstance {
    pub fn new(doc_id: impl Into<String>, pages: Vec<Embedding>, truth_rank: Vec<usize>) -> Result<Self, CorpusError> {
        if pages.len() != truth_rank.len() {
            return Err(CorpusError::Document("truth_rank length differs from page count".into()));
        }
        if !is_permutation(&truth_rank) {
            return Err(CorpusError::Document(format!("truth_rank {truth_rank:?} is not a permutation")));
        }
        if !(MIN_PAGES..=MAX_PAGES).contains(&pages.len()) {
            return Err(CorpusError::LengthOutOfRange(pages.len()));
        }
        Ok(Self { doc_id: doc_id.into(), pages, truth_rank })
    }

    pub fn pages(&self) -> &[Embedding] {
        &self.pages
    }

    pub fn truth_rank(&self) -> &[usize] {
        &self.truth_rank
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn bucket(&self) -> LengthBucket {
        bucket_of(self.len()).expect("instance lengths are validated on construction")
    }

    /// Slot indices in true reading order.
    pub fn true_order(&self) -> Vec<usize> {
        let mut order = vec![0; self.len()];
        for (slot, &rank) in self.truth_rank.iter().enumerate() {
            order[rank] = slot;
        }
        order
    }

    /// Pages as an n×d matrix in slot order.
    pub fn page_matrix(&self) -> Tensor<f32> {
        pages_matrix(&self.pages)
    }

    /// Rebuilds the original document by sorting pages by truth rank.
    pub fn unshuffle(&self) -> Document {
        let pages = self.true_order().into_iter().map(|s| self.pages[s].clone()).collect();
        Document { doc_id: self.doc_id.clone(), pages }
    }
}

pub fn pages_matrix(pages: &[Embedding]) -> Tensor<f32> {
    let rows: Vec<&[f32]> = pages.iter().map(Embedding::values).collect();
    Tensor::from_rows(&rows).expect("validated equal-dimension pages")
}

/// Uniformly random slot permutation drawn from `seed`.
pub fn shuffle_instance(doc: &Document, seed: SeedStream) -> ShuffledInstance {
    let mut perm: Vec<usize> = (0..doc.len()).collect();
    perm.shuffle(&mut seed.rng());
    let pages = perm.iter().map(|&r| doc.pages[r].clone()).collect();
    ShuffledInstance { doc_id: doc.doc_id.clone(), pages, truth_rank: perm }
}

/// One fixed shuffle per document, keyed by the experiment seed and doc id.
pub fn shuffle_all(docs: &[Document], seed: SeedStream) -> Vec<ShuffledInstance> {
    docs.iter().map(|d| shuffle_instance(d, seed.split(&d.doc_id))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LengthBucket {
    B2_5,
    B6_10,
    B11_15,
    B16_20,
    B21_25,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 5] =
        [LengthBucket::B2_5, LengthBucket::B6_10, LengthBucket::B11_15, LengthBucket::B16_20, LengthBucket::B21_25];

    /// Inclusive page-count range.
    pub fn range(self) -> (usize, usize) {
        match self {
            LengthBucket::B2_5 => (2, 5),
            LengthBucket::B6_10 => (6, 10),
            LengthBucket::B11_15 => (11, 15),
            LengthBucket::B16_20 => (16, 20),
            LengthBucket::B21_25 => (21, 25),
        }
    }

    pub fn contains(self, len: usize) -> bool {
        let (lo, hi) = self.range();
        (lo..=hi).contains(&len)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Column label such as `2-5`.
    pub fn label(self) -> String {
        let (lo, hi) = self.range();
        format!("{lo}-{hi}")
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        Self::ALL.into_iter().find(|b| b.label() == s || format!("{b:?}").eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for LengthBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

pub fn bucket_of(len: usize) -> Result<LengthBucket, CorpusError> {
    LengthBucket::ALL.into_iter().find(|b| b.contains(len)).ok_or(CorpusError::LengthOutOfRange(len))
}

pub struct Splits {
    pub train: Vec<Document>,
    pub val: Vec<Document>,
    pub test: Vec<Document>,
}

/// Seeded shuffle, then contiguous slices of sizes `floor(n·f)` for
/// validation and test, with the remainder going to train.
pub fn split_corpus(docs: &[Document], fractions: (f64, f64, f64), seed: SeedStream) -> Result<Splits, CorpusError> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(CorpusError::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let n = docs.len();
    if n < 3 {
        return Err(CorpusError::Split(n));
    }
    let n_val = (n as f64 * fv).floor() as usize;
    let n_test = (n as f64 * fs).floor() as usize;
    let n_train = n - n_val - n_test;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed.rng());
    let take = |r: std::ops::Range<usize>| idx[r].iter().map(|&i| docs[i].clone()).collect::<Vec<_>>();
    Ok(Splits { train: take(0..n_train), val: take(n_train..n_train + n_val), test: take(n_train + n_val..n) })
}

/// Document counts per bucket, in bucket order.
pub fn bucket_histogram(docs: &[Document]) -> [usize; 5] {
    let mut h = [0; 5];
    for d in docs {
        h[d.bucket().index()] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(n: usize) -> Document {
        let pages = (0..n).map(|i| Embedding::new(vec![i as f32, 1.0]).unwrap()).collect();
        Document::new(format!("d{n}"), pages).unwrap()
    }

    #[test]
    fn buckets() {
        assert_eq!(bucket_of(7).unwrap(), LengthBucket::B6_10);
        assert_eq!(bucket_of(15).unwrap(), LengthBucket::B11_15);
        assert_eq!(bucket_of(16).unwrap(), LengthBucket::B16_20);
        assert!(matches!(bucket_of(1), Err(CorpusError::LengthOutOfRange(1))));
        assert!(bucket_of(26).is_err());
        for len in 2..=25 {
            assert_eq!(LengthBucket::ALL.iter().filter(|b| b.contains(len)).count(), 1);
        }
        assert_eq!(LengthBucket::parse("6-10"), Some(LengthBucket::B6_10));
        assert_eq!(LengthBucket::parse("b21_25"), Some(LengthBucket::B21_25));
    }

    #[test]
    fn two_pages_have_two_arrangements() {
        let d = doc(2);
        let mut seen = std::collections::BTreeSet::new();
        for s in 0..200 {
            seen.insert(shuffle_instance(&d, SeedStream::new(s)).truth_rank().to_vec());
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn unshuffle_restores_document() {
        let d = doc(9);
        for s in 0..20 {
            let inst = shuffle_instance(&d, SeedStream::new(s));
            assert!(is_permutation(inst.truth_rank()));
            assert_eq!(inst.unshuffle(), d);
            assert_eq!(inst, shuffle_instance(&d, SeedStream::new(s)));
        }
    }

    #[test]
    fn split_sizes() {
        let docs: Vec<_> = (0..100).map(|i| doc(2 + i % 20)).collect();
        let s = split_corpus(&docs, (0.7, 0.15, 0.15), SeedStream::new(1)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        let docs: Vec<_> = (0..101).map(|i| doc(2 + i % 20)).collect();
        let s = split_corpus(&docs, (0.7, 0.15, 0.15), SeedStream::new(1)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (71, 15, 15));
        assert!(matches!(split_corpus(&docs[..2], (0.7, 0.15, 0.15), SeedStream::new(1)), Err(CorpusError::Split(2))));
    }

    #[test]
    fn split_is_a_partition() {
        let docs: Vec<_> = (0..57)
            .map(|i| {
                let mut d = doc(3);
                d.doc_id = format!("doc-{i}");
                d
            })
            .collect();
        let s = split_corpus(&docs, (0.7, 0.15, 0.15), SeedStream::new(9)).unwrap();
        let mut ids: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).map(|d| d.doc_id.clone()).collect();
        ids.sort();
        let mut want: Vec<_> = docs.iter().map(|d| d.doc_id.clone()).collect();
        want.sort();
        assert_eq!(ids, want);
    }

    #[test]
    fn instance_rejects_bad_ranks() {
        let pages = doc(3).pages().to_vec();
        assert!(ShuffledInstance::new("x", pages.clone(), vec![0, 0, 1]).is_err());
        assert!(ShuffledInstance::new("x", pages, vec![2, 0, 1]).is_ok());
    }
}
