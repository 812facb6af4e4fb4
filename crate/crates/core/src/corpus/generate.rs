//! Seeded synthetic corpus that mimics heterogeneous page collections.
//!
//! Each page is `type centroid + chronology(t) + noise`. Centroids sit in the
//! subspace orthogonal to the chronology coordinates and dominate cosine
//! similarity, so neighbours in embedding space are usually pages of the same
//! kind rather than pages that are adjacent in time. Chronology is a smooth
//! cosine mixture of the absolute page position `t = page / (MAX_PAGES - 1)`,
//! which keeps it learnable but not linear in `t`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Document, Embedding, LengthBucket, MAX_PAGES};
use crate::numcore::SeedStream;

/// Share of documents per length bucket, from the reference collection
/// (1,247 / 1,683 / 1,204 / 789 / 538 of 5,461).
pub const REFERENCE_LENGTH_WEIGHTS: [f64; 5] = [22.8, 30.8, 22.0, 14.4, 9.9];

/// Cosine components per chronology coordinate.
const CURVE_COMPONENTS: usize = 3;
/// Frequency range of the chronology curve, in cycles over the full 25-page span.
const CURVE_FREQ: (f64, f64) = (0.75, 2.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_docs: usize,
    pub dim: usize,
    pub length_weights: [f64; 5],
    pub n_page_types: usize,
    pub chrono_dim: usize,
    pub chrono_strength: f64,
    pub type_noise: f64,
    pub page_noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_docs: 2000,
            dim: 64,
            length_weights: REFERENCE_LENGTH_WEIGHTS,
            n_page_types: 8,
            chrono_dim: 8,
            chrono_strength: 1.0,
            type_noise: 3.0,
            page_noise: 0.15,
            seed: 17,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Config(m.to_string()));
        if self.length_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("length weights must be finite and non-negative");
        }
        if self.length_weights.iter().sum::<f64>() <= 0.0 {
            return bad("length weights must have a positive sum");
        }
        if self.dim == 0 || self.chrono_dim == 0 || self.chrono_dim >= self.dim {
            return bad("need 0 < chrono_dim < dim");
        }
        if self.n_page_types == 0 {
            return bad("need at least one page type");
        }
        for (name, v) in [
            ("chrono_strength", self.chrono_strength),
            ("type_noise", self.type_noise),
            ("page_noise", self.page_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CorpusError::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

struct World {
    centroids: Vec<Vec<f64>>,
    /// (amplitude, frequency, phase) per chronology coordinate and component.
    curve: Vec<[(f64, f64, f64); CURVE_COMPONENTS]>,
}

impl World {
    fn draw(cfg: &CorpusConfig, seed: SeedStream) -> Self {
        let mut rng = seed.split("centroids").rng();
        let free = cfg.dim - cfg.chrono_dim;
        let centroids = (0..cfg.n_page_types)
            .map(|_| {
                let v: Vec<f64> = (0..free).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let mut full = vec![0.0; cfg.dim];
                for (dst, x) in full[cfg.chrono_dim..].iter_mut().zip(&v) {
                    *dst = cfg.type_noise * x / norm;
                }
                full
            })
            .collect();

        let mut rng = seed.split("curve").rng();
        let amp_scale = 1.0 / (CURVE_COMPONENTS as f64).sqrt();
        let curve = (0..cfg.chrono_dim)
            .map(|_| {
                std::array::from_fn(|_| {
                    let a: f64 = rng.sample::<f64, _>(StandardNormal) * amp_scale;
                    let f = rng.random_range(CURVE_FREQ.0..CURVE_FREQ.1);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    (a, f, phase)
                })
            })
            .collect();
        Self { centroids, curve }
    }

    fn chronology(&self, t: f64) -> impl Iterator<Item = f64> + '_ {
        self.curve
            .iter()
            .map(move |comps| comps.iter().map(|&(a, f, ph)| a * (std::f64::consts::TAU * f * t + ph).cos()).sum())
    }
}

/// Deterministic corpus for `cfg` (including its seed).
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<Document>, CorpusError> {
    cfg.validate()?;
    let root = SeedStream::new(cfg.seed);
    let world = World::draw(cfg, root.split("world"));
    let lengths = WeightedIndex::new(cfg.length_weights).map_err(|e| CorpusError::Config(e.to_string()))?;
    let docs_seed = root.split("docs");

    (0..cfg.n_docs)
        .map(|i| {
            let mut rng = docs_seed.split_index(i as u64).rng();
            let bucket = LengthBucket::ALL[lengths.sample(&mut rng)];
            let (lo, hi) = bucket.range();
            let n = rng.random_range(lo..=hi);
            let pages = (0..n)
                .map(|p| {
                    let t = p as f64 / (MAX_PAGES - 1) as f64;
                    let kind = rng.random_range(0..cfg.n_page_types);
                    let mut v = world.centroids[kind].clone();
                    for (dst, c) in v.iter_mut().zip(world.chronology(t)) {
                        *dst += cfg.chrono_strength * c;
                    }
                    for x in &mut v {
                        *x += cfg.page_noise * rng.sample::<f64, _>(StandardNormal);
                    }
                    Embedding::new(v.into_iter().map(|x| x as f32).collect())
                })
                .collect::<Result<Vec<_>, _>>()?;
            Document::new(format!("doc-{i:05}"), pages)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::bucket_histogram;

    #[test]
    fn same_seed_same_corpus() {
        let cfg = CorpusConfig { n_docs: 30, ..Default::default() };
        assert_eq!(generate_corpus(&cfg).unwrap(), generate_corpus(&cfg).unwrap());
        let other = CorpusConfig { seed: cfg.seed + 1, ..cfg.clone() };
        assert_ne!(generate_corpus(&cfg).unwrap(), generate_corpus(&other).unwrap());
    }

    #[test]
    fn default_lengths_follow_reference_shares() {
        let cfg = CorpusConfig { n_docs: 10_000, dim: 4, chrono_dim: 2, ..Default::default() };
        let docs = generate_corpus(&cfg).unwrap();
        let h = bucket_histogram(&docs);
        for (count, pct) in h.iter().zip(REFERENCE_LENGTH_WEIGHTS) {
            let share = 100.0 * *count as f64 / docs.len() as f64;
            assert!((share - pct).abs() <= 3.0, "share {share} vs {pct}");
        }
    }

    #[test]
    fn zero_weight_bucket_never_drawn() {
        let cfg = CorpusConfig { n_docs: 300, length_weights: [1.0, 0.0, 0.0, 0.0, 0.0], ..Default::default() };
        assert!(generate_corpus(&cfg).unwrap().iter().all(|d| d.len() <= 5));
    }

    #[test]
    fn rejects_invalid_configs() {
        let bad = [
            CorpusConfig { length_weights: [0.0; 5], ..Default::default() },
            CorpusConfig { length_weights: [1.0, -1.0, 1.0, 1.0, 1.0], ..Default::default() },
            CorpusConfig { chrono_dim: 64, ..Default::default() },
            CorpusConfig { page_noise: -0.1, ..Default::default() },
            CorpusConfig { n_page_types: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(generate_corpus(&cfg), Err(CorpusError::Config(_))), "{cfg:?}");
        }
    }
}
