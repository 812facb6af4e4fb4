//! Zero-parameter ordering baselines.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::Embedding;
use crate::metrics::Ordering;
use crate::numcore::SeedStream;

/// Cosine similarity; any zero-norm input yields −1 so it is never preferred.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return -1.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn similarity_matrix(pages: &[Embedding]) -> Vec<Vec<f64>> {
    if pages.iter().any(|p| p.values().iter().all(|&v| v == 0.0)) {
        log::warn!("zero-norm page embedding; its cosine similarity is treated as -1");
    }
    pages.iter().map(|a| pages.iter().map(|b| cosine(a.values(), b.values())).collect()).collect()
}

/// Uniformly random permutation.
pub fn order_random(n: usize, seed: SeedStream) -> Ordering {
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(&mut seed.rng());
    Ordering::new(slots).expect("shuffled identity is a permutation")
}

/// Chains each page to its most similar unvisited page; ties go to the lower index.
fn chain_from(sim: &[Vec<f64>], start: usize) -> (Vec<usize>, f64) {
    let n = sim.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut cur = start;
    let mut length = 0.0;
    visited[cur] = true;
    order.push(cur);
    while order.len() < n {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..n).filter(|&j| !visited[j]) {
            if best.is_none_or(|(_, s)| sim[cur][j] > s) {
                best = Some((j, sim[cur][j]));
            }
        }
        let (next, s) = best.expect("an unvisited page remains");
        length += 1.0 - s;
        visited[next] = true;
        order.push(next);
        cur = next;
    }
    (order, length)
}

/// Greedy nearest-neighbour chain from a seeded random start page.
pub fn order_greedy_nn(pages: &[Embedding], seed: SeedStream) -> Ordering {
    let n = pages.len();
    if n == 0 {
        return Ordering::identity(0);
    }
    let start = seed.rng().random_range(0..n);
    let (order, _) = chain_from(&similarity_matrix(pages), start);
    Ordering::new(order).expect("chain visits every page once")
}

/// Nearest-neighbour open tour under distance 1 − cos, tried from every start;
/// the shortest tour wins, ties going to the lowest start index.
pub fn order_tsp_nn(pages: &[Embedding]) -> Ordering {
    let n = pages.len();
    if n == 0 {
        return Ordering::identity(0);
    }
    let sim = similarity_matrix(pages);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for start in 0..n {
        let (order, len) = chain_from(&sim, start);
        if best.as_ref().is_none_or(|(_, b)| len < *b) {
            best = Some((order, len));
        }
    }
    Ordering::new(best.expect("at least one start").0).expect("chain visits every page once")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, shuffle_all, CorpusConfig};
    use crate::metrics::mean_tau;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn greedy_follows_nearest_neighbour() {
        let pages = [emb(&[1.0, 0.0]), emb(&[0.9, 0.436]), emb(&[0.0, 1.0])];
        let sim = similarity_matrix(&pages);
        assert_eq!(chain_from(&sim, 0).0, vec![0, 1, 2]);
        // Whatever the seeded start, the output is a valid chain.
        for s in 0..10 {
            let o = order_greedy_nn(&pages, SeedStream::new(s));
            assert_eq!(o.len(), 3);
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        let pages = [emb(&[1.0, 0.0]), emb(&[0.0, 1.0]), emb(&[0.0, 1.0])];
        assert_eq!(chain_from(&similarity_matrix(&pages), 0).0, vec![0, 1, 2]);
    }

    #[test]
    fn zero_norm_is_least_similar() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), -1.0);
        let pages = [emb(&[1.0, 0.0]), emb(&[0.0, 0.0]), emb(&[0.5, 0.5])];
        assert_eq!(chain_from(&similarity_matrix(&pages), 0).0, vec![0, 2, 1]);
    }

    #[test]
    fn tsp_picks_shortest_open_tour() {
        // Points on an arc: the best open tour walks the arc end to end.
        let pages: Vec<_> = [0.0f32, 0.3, 0.6, 0.9, 1.2].iter().map(|a| emb(&[a.cos(), a.sin()])).collect();
        let o = order_tsp_nn(&pages);
        assert!(o.slots() == [0, 1, 2, 3, 4] || o.slots() == [4, 3, 2, 1, 0]);
    }

    #[test]
    fn tsp_small_cases() {
        assert_eq!(order_tsp_nn(&[emb(&[1.0, 0.0]), emb(&[0.0, 1.0])]).slots(), &[0, 1]);
        let pages = [emb(&[1.0, 0.0]), emb(&[0.9, 0.436]), emb(&[0.0, 1.0])];
        assert_eq!(order_tsp_nn(&pages).slots(), &[0, 1, 2]);
    }

    #[test]
    fn identical_pages_follow_slot_order_after_start() {
        let pages = vec![emb(&[0.3, 0.4]); 5];
        for s in 0..10 {
            let o = order_greedy_nn(&pages, SeedStream::new(s));
            let start = o.slots()[0];
            let rest: Vec<usize> = (0..5).filter(|&i| i != start).collect();
            assert_eq!(&o.slots()[1..], rest.as_slice());
        }
    }

    #[test]
    fn invariant_to_positive_scaling() {
        let docs = generate_corpus(&CorpusConfig { n_docs: 20, ..Default::default() }).unwrap();
        for d in &docs {
            let scaled: Vec<_> =
                d.pages().iter().map(|p| emb(&p.values().iter().map(|x| x * 4.0).collect::<Vec<_>>())).collect();
            assert_eq!(order_tsp_nn(d.pages()), order_tsp_nn(&scaled));
            assert_eq!(order_greedy_nn(d.pages(), SeedStream::new(2)), order_greedy_nn(&scaled, SeedStream::new(2)));
        }
    }

    #[test]
    fn two_page_random_is_fair() {
        let forward = (0..10_000).filter(|&s| order_random(2, SeedStream::new(s)).slots() == [0, 1]).count();
        assert!((forward as f64 / 10_000.0 - 0.5).abs() < 0.02, "{forward}");
    }

    #[test]
    fn seeded_baselines_are_deterministic() {
        assert_eq!(order_random(12, SeedStream::new(3)), order_random(12, SeedStream::new(3)));
        let pages: Vec<_> = (0..6).map(|i| emb(&[i as f32, 1.0, 0.5])).collect();
        assert_eq!(order_greedy_nn(&pages, SeedStream::new(5)), order_greedy_nn(&pages, SeedStream::new(5)));
    }

    #[test]
    fn random_averages_near_zero() {
        let docs = generate_corpus(&CorpusConfig { n_docs: 400, ..Default::default() }).unwrap();
        let inst = shuffle_all(&docs, SeedStream::new(1));
        let preds: Vec<_> = inst
            .iter()
            .enumerate()
            .map(|(i, x)| order_random(x.len(), SeedStream::new(99).split_index(i as u64)))
            .collect();
        let s = mean_tau(&inst, &preds).unwrap();
        assert!(s.overall.abs() < 0.08, "{}", s.overall);
    }
}
