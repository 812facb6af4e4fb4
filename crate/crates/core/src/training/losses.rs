use crate::models::TrainOutput;
use crate::numcore::{Graph, Real, Var};

use super::TrainError;

/// y[i][j] is true iff the page in slot j comes after the page in slot i.
pub fn make_pairwise_targets(truth_rank: &[usize]) -> Vec<bool> {
    let n = truth_rank.len();
    (0..n * n).map(|k| truth_rank[k % n] > truth_rank[k / n]).collect()
}

/// Mean binary cross-entropy of sigmoid(s_ij) against y over off-diagonal pairs.
pub fn loss_pairwise<S: Real>(g: &mut Graph<S>, scores: Var, y: &[bool]) -> Result<Var, TrainError> {
    let n = g.value(scores).rows();
    if y.len() != n * n || g.value(scores).numel() != n * n {
        return Err(TrainError::Domain(format!("pairwise targets have {} entries for an {n}×{n} matrix", y.len())));
    }
    let targets: Vec<S> = y.iter().map(|&b| if b { S::one() } else { S::zero() }).collect();
    let weights: Vec<S> = (0..n * n).map(|k| if k / n == k % n { S::zero() } else { S::one() }).collect();
    Ok(g.bce_with_logits(scores, &targets, &weights)?)
}

/// Mean cross-entropy over teacher-forced pointer steps.
pub fn loss_pointer<S: Real>(
    g: &mut Graph<S>,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<Var, TrainError> {
    Ok(g.cross_entropy(logits, targets, Some(mask))?)
}

/// Mean squared error against normalised true positions rank / (n − 1).
pub fn loss_position<S: Real>(g: &mut Graph<S>, scores: Var, truth_rank: &[usize]) -> Result<Var, TrainError> {
    let n = truth_rank.len();
    if n < 2 {
        return Err(TrainError::Domain(format!("position loss needs at least two pages, got {n}")));
    }
    let target: Vec<S> = truth_rank.iter().map(|&r| S::of(r as f64 / (n - 1) as f64)).collect();
    Ok(g.mse(scores, &target)?)
}

/// Applies the loss that matches the model's output kind.
pub fn loss_for<S: Real>(g: &mut Graph<S>, out: TrainOutput, truth_rank: &[usize]) -> Result<Var, TrainError> {
    match out {
        TrainOutput::Position { scores } => loss_position(g, scores, truth_rank),
        TrainOutput::Pointer { logits, mask, targets } => loss_pointer(g, logits, &targets, &mask),
        TrainOutput::Pairwise { scores } => loss_pairwise(g, scores, &make_pairwise_targets(truth_rank)),
    }
}
