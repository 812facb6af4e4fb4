//! Kendall's τ, bucketed means, attention locality, and epoch-to-epoch stability.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::corpus::{is_permutation, LengthBucket, ShuffledInstance};
use crate::numcore::{Real, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("Kendall's tau needs at least two items, got {0}")]
    TooShort(usize),
    #[error("{0}")]
    Domain(String),
}

/// Predicted reading order as a sequence of shuffled-slot indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Ordering {
    slots: Vec<usize>,
}

impl Ordering {
    pub fn new(slots: Vec<usize>) -> Result<Self, MetricError> {
        if !is_permutation(&slots) {
            return Err(MetricError::Domain(format!("{slots:?} is not a permutation")));
        }
        Ok(Self { slots })
    }

    pub fn identity(n: usize) -> Self {
        Self { slots: (0..n).collect() }
    }

    /// Slots sorted by ascending score; equal scores keep ascending slot order.
    pub fn by_ascending_score<S: PartialOrd>(scores: &[S]) -> Self {
        let mut slots: Vec<usize> = (0..scores.len()).collect();
        slots.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        Self { slots }
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn reversed(&self) -> Self {
        Self { slots: self.slots.iter().rev().copied().collect() }
    }
}

/// Counts inversions by merge sort.
fn inversions(v: &mut [usize], scratch: &mut Vec<usize>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = inversions(&mut v[..mid], scratch) + inversions(&mut v[mid..], scratch);
    scratch.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[i] <= v[j] {
            scratch.push(v[i]);
            i += 1;
        } else {
            scratch.push(v[j]);
            inv += (mid - i) as u64;
            j += 1;
        }
    }
    scratch.extend_from_slice(&v[i..mid]);
    scratch.extend_from_slice(&v[j..n]);
    v.copy_from_slice(scratch);
    inv
}

/// τ = (concordant − discordant) / (n(n−1)/2) between the predicted order and
/// the true chronological ranks of the slots.
pub fn kendall_tau(pred: &Ordering, truth_rank: &[usize]) -> Result<f64, MetricError> {
    let n = pred.len();
    if n != truth_rank.len() {
        return Err(MetricError::Domain(format!("prediction has {n} slots, truth has {}", truth_rank.len())));
    }
    if n < 2 {
        return Err(MetricError::TooShort(n));
    }
    if !is_permutation(truth_rank) {
        return Err(MetricError::Domain("truth_rank is not a permutation".into()));
    }
    // True ranks read in predicted order; each inversion is a discordant pair.
    let mut seq: Vec<usize> = pred.slots().iter().map(|&s| truth_rank[s]).collect();
    let discordant = inversions(&mut seq, &mut Vec::with_capacity(n));
    let total = (n * (n - 1) / 2) as u64;
    let concordant = total - discordant;
    Ok((concordant as f64 - discordant as f64) / total as f64)
}

/// Mean τ per length bucket plus the overall document mean.
#[derive(Clone, Debug, PartialEq)]
pub struct TauSummary {
    /// Buckets without documents are absent.
    pub per_bucket: BTreeMap<LengthBucket, BucketMean>,
    pub overall: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BucketMean {
    pub mean: f64,
    pub count: usize,
}

impl TauSummary {
    pub fn from_scores(scores: &[(LengthBucket, f64)]) -> Result<Self, MetricError> {
        if scores.is_empty() {
            return Err(MetricError::Domain("no documents to average".into()));
        }
        let mut sums: BTreeMap<LengthBucket, (f64, usize)> = BTreeMap::new();
        for &(b, tau) in scores {
            let e = sums.entry(b).or_insert((0.0, 0));
            e.0 += tau;
            e.1 += 1;
        }
        let per_bucket = sums.into_iter().map(|(b, (s, c))| (b, BucketMean { mean: s / c as f64, count: c })).collect();
        let overall = scores.iter().map(|s| s.1).sum::<f64>() / scores.len() as f64;
        Ok(Self { per_bucket, overall, count: scores.len() })
    }

    pub fn bucket(&self, b: LengthBucket) -> Option<f64> {
        self.per_bucket.get(&b).map(|m| m.mean)
    }
}

pub fn mean_tau(instances: &[ShuffledInstance], predictions: &[Ordering]) -> Result<TauSummary, MetricError> {
    if instances.len() != predictions.len() {
        return Err(MetricError::Domain(format!(
            "{} instances but {} predictions",
            instances.len(),
            predictions.len()
        )));
    }
    let scores = instances
        .iter()
        .zip(predictions)
        .map(|(inst, pred)| Ok((inst.bucket(), kendall_tau(pred, inst.truth_rank())?)))
        .collect::<Result<Vec<_>, MetricError>>()?;
    TauSummary::from_scores(&scores)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalityStats {
    /// Attention mass on entries with |i − j| ≤ window, averaged over rows.
    pub local_fraction: f64,
    /// Mean of Σ_j p(i,j)·|i − j| over rows.
    pub avg_distance: f64,
}

/// Locality of a set of attention stacks (each heads×n×n, or n×n), averaged
/// uniformly over every row of every head of every stack.
pub fn attention_locality<S: Real>(stacks: &[Tensor<S>], window: usize) -> Result<LocalityStats, MetricError> {
    let mut local = 0.0;
    let mut dist = 0.0;
    let mut rows = 0usize;
    for stack in stacks {
        let n = stack.cols();
        if stack.dims().len() < 2 || stack.dims()[stack.dims().len() - 2] != n {
            return Err(MetricError::Domain(format!("attention matrices must be square, got {:?}", stack.dims())));
        }
        for (r, row) in stack.data().chunks(n).enumerate() {
            let i = r % n;
            let sum: f64 = row.iter().map(|p| p.as_f64()).sum();
            if (sum - 1.0).abs() > 1e-5 || row.iter().any(|p| p.as_f64() < 0.0 || !p.is_finite()) {
                return Err(MetricError::Domain(format!("attention row {r} is not stochastic (sums to {sum})")));
            }
            for (j, p) in row.iter().enumerate() {
                let p = p.as_f64();
                let d = i.abs_diff(j);
                if d <= window {
                    local += p;
                }
                dist += p * d as f64;
            }
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(MetricError::Domain("no attention rows".into()));
    }
    Ok(LocalityStats { local_fraction: local / rows as f64, avg_distance: dist / rows as f64 })
}

/// Population standard deviation of a per-epoch validation τ series.
pub fn stability_sigma(series: &[f64]) -> Result<f64, MetricError> {
    if series.len() < 2 {
        return Err(MetricError::Domain(format!("need at least two epochs, got {}", series.len())));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    Ok((series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub sigma: f64,
    /// Epochs (0-based) whose validation τ fell below zero.
    pub negative_epochs: Vec<usize>,
}

impl StabilityReport {
    pub fn has_worse_than_random(&self) -> bool {
        !self.negative_epochs.is_empty()
    }
}

pub fn stability_report(series: &[f64]) -> Result<StabilityReport, MetricError> {
    Ok(StabilityReport {
        sigma: stability_sigma(series)?,
        negative_epochs: series.iter().enumerate().filter(|(_, &t)| t < 0.0).map(|(i, _)| i).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_tau(pred: &[usize], truth: &[usize]) -> f64 {
        let n = pred.len();
        let mut pos = vec![0; n];
        for (k, &s) in pred.iter().enumerate() {
            pos[s] = k;
        }
        let (mut c, mut d) = (0i64, 0i64);
        for a in 0..n {
            for b in a + 1..n {
                if (pos[a] < pos[b]) == (truth[a] < truth[b]) {
                    c += 1;
                } else {
                    d += 1;
                }
            }
        }
        (c - d) as f64 / (n * (n - 1) / 2) as f64
    }

    fn perm(n: usize) -> impl Strategy<Value = Vec<usize>> {
        Just((0..n).collect::<Vec<_>>()).prop_shuffle()
    }

    #[test]
    fn hand_cases() {
        let truth = [0, 1, 2];
        assert_eq!(kendall_tau(&Ordering::identity(3), &truth).unwrap(), 1.0);
        assert_eq!(kendall_tau(&Ordering::new(vec![2, 1, 0]).unwrap(), &truth).unwrap(), -1.0);
        let tau = kendall_tau(&Ordering::new(vec![1, 0, 2]).unwrap(), &truth).unwrap();
        assert!((tau - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(kendall_tau(&Ordering::identity(1), &[0]), Err(MetricError::TooShort(1)));
        assert!(kendall_tau(&Ordering::identity(2), &[0, 0]).is_err());
        assert!(Ordering::new(vec![0, 0]).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force((pred, truth) in (2usize..=10).prop_flat_map(|n| (perm(n), perm(n)))) {
            let tau = kendall_tau(&Ordering::new(pred.clone()).unwrap(), &truth).unwrap();
            prop_assert_eq!(tau, brute_tau(&pred, &truth));
        }

        #[test]
        fn reversal_negates((pred, truth) in (2usize..=25).prop_flat_map(|n| (perm(n), perm(n)))) {
            let p = Ordering::new(pred).unwrap();
            let a = kendall_tau(&p, &truth).unwrap();
            let b = kendall_tau(&p.reversed(), &truth).unwrap();
            prop_assert_eq!(a, -b);
        }

        #[test]
        fn relabeling_invariant((pred, truth, relabel) in (2usize..=12).prop_flat_map(|n| (perm(n), perm(n), perm(n)))) {
            // Slot s becomes relabel[s] in both the prediction and the truth table.
            let pred2: Vec<usize> = pred.iter().map(|&s| relabel[s]).collect();
            let mut truth2 = vec![0; truth.len()];
            for (s, &r) in truth.iter().enumerate() {
                truth2[relabel[s]] = r;
            }
            let a = kendall_tau(&Ordering::new(pred).unwrap(), &truth).unwrap();
            let b = kendall_tau(&Ordering::new(pred2).unwrap(), &truth2).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn full_window_is_fully_local(n in 1usize..8, raw in proptest::collection::vec(0.01f64..1.0, 64)) {
            let mut data = Vec::new();
            for i in 0..n {
                let row: Vec<f64> = (0..n).map(|j| raw[(i * n + j) % raw.len()]).collect();
                let s: f64 = row.iter().sum();
                data.extend(row.iter().map(|x| x / s));
            }
            let t = Tensor::new(vec![1, n, n], data).unwrap();
            let stats = attention_locality(&[t], n.saturating_sub(1)).unwrap();
            prop_assert!((stats.local_fraction - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ascending_sort_ties_by_slot() {
        assert_eq!(Ordering::by_ascending_score(&[0.9, 0.1, 0.5]).slots(), &[1, 2, 0]);
        assert_eq!(Ordering::by_ascending_score(&[0.5, 0.5]).slots(), &[0, 1]);
    }

    #[test]
    fn bucket_means() {
        let s = TauSummary::from_scores(&[(LengthBucket::B2_5, 1.0), (LengthBucket::B2_5, 0.0)]).unwrap();
        assert_eq!(s.bucket(LengthBucket::B2_5), Some(0.5));
        assert_eq!(s.bucket(LengthBucket::B6_10), None);
        let s = TauSummary::from_scores(&[(LengthBucket::B11_15, 0.25)]).unwrap();
        assert_eq!(s.bucket(LengthBucket::B11_15), Some(0.25));
        assert_eq!(s.overall, 0.25);
    }

    #[test]
    fn locality_hand_cases() {
        let eye = Tensor::new(vec![1, 4, 4], (0..16).map(|k| if k % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        assert_eq!(
            attention_locality::<f64>(&[eye], 2).unwrap(),
            LocalityStats { local_fraction: 1.0, avg_distance: 0.0 }
        );

        let uniform = Tensor::new(vec![3, 3], vec![1.0 / 3.0; 9]).unwrap();
        let s = attention_locality::<f64>(&[uniform], 2).unwrap();
        assert!((s.local_fraction - 1.0).abs() < 1e-12);
        assert!((s.avg_distance - 8.0 / 9.0).abs() < 1e-12);

        let far = |n: usize| {
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                let j = if i < n / 2 { n - 1 } else { 0 };
                d[i * n + j] = 1.0;
            }
            Tensor::new(vec![n, n], d).unwrap()
        };
        let s10 = attention_locality::<f64>(&[far(10)], 2).unwrap();
        assert_eq!(s10.local_fraction, 0.0);
        let s20 = attention_locality::<f64>(&[far(20)], 2).unwrap();
        assert!(s20.avg_distance > s10.avg_distance);

        let bad = Tensor::new(vec![2, 2], vec![0.5, 0.2, 0.5, 0.5]).unwrap();
        assert!(attention_locality::<f64>(&[bad], 2).is_err());
    }

    #[test]
    fn sigma_cases() {
        assert!(stability_sigma(&[0.4, 0.4, 0.4]).unwrap() < 1e-15);
        assert_eq!(stability_sigma(&[0.0, 1.0]).unwrap(), 0.5);
        assert!(stability_sigma(&[0.3]).is_err());
        let r = stability_report(&[0.2, -0.1, 0.3, -0.05]).unwrap();
        assert!(r.has_worse_than_random());
        assert_eq!(r.negative_epochs, vec![1, 3]);
    }
}
