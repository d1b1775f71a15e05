use super::{ClassificationHead, RankingHead, RegressionHead};
use crate::error::{contract, Error, Result};
use crate::numerics::kernels::softmax_in_place;
use crate::numerics::tape::LOG_FLOOR;

/// Tolerance on the total mass of a target distribution.
pub const DISTRIBUTION_TOL: f64 = 1e-6;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn floored_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// Checks that `q` is a distribution over `len` outcomes.
pub fn check_distribution(q: &[f64], len: usize) -> Result<()> {
    if q.len() != len {
        return Err(Error::Data(format!("distribution has {} entries, expected {len}", q.len())));
    }
    if q.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Data(format!("distribution has negative or non-finite entries: {q:?}")));
    }
    let total: f64 = q.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::Data(format!("distribution sums to {total}, not 1")));
    }
    Ok(())
}

/// Class probabilities `softmax(W x + b)`.
pub fn classify(x: &[f64], head: &ClassificationHead) -> Result<Vec<f64>> {
    let (n, d) = head.weight.dims2()?;
    if x.len() != d || head.bias.len() != n {
        return Err(Error::Dimension {
            op: "classify",
            left: head.weight.shape().to_vec(),
            right: vec![x.len()],
        });
    }
    let mut logits: Vec<f64> = (0..n).map(|c| dot(head.weight.row(c), x) + head.bias.data()[c]).collect();
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// `−ln p[c]` with `p` floored.
pub fn hard_ce_loss(probs: &[f64], gold: usize) -> Result<f64> {
    match probs.get(gold) {
        Some(&p) => Ok(-floored_ln(p)),
        None => Err(contract(format!("class {gold} out of range for {} classes", probs.len()))),
    }
}

/// `−Σ q[c] ln p[c]` with `p` floored.
pub fn soft_ce_loss(probs: &[f64], q: &[f64]) -> Result<f64> {
    check_distribution(q, probs.len())?;
    Ok(-probs.iter().zip(q).map(|(&p, &t)| t * floored_ln(p)).sum::<f64>())
}

/// `alpha·hard + (1−alpha)·soft`.
pub fn combined_loss(hard: f64, soft: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(contract(format!("alpha must be in [0, 1], got {alpha}")));
    }
    Ok(alpha * hard + (1.0 - alpha) * soft)
}

/// `w·x + b`.
pub fn regress(x: &[f64], head: &RegressionHead) -> Result<f64> {
    if head.weight.len() != x.len() || head.bias.len() != 1 {
        return Err(Error::Dimension {
            op: "regress",
            left: head.weight.shape().to_vec(),
            right: vec![x.len()],
        });
    }
    Ok(dot(head.weight.data(), x) + head.bias.data()[0])
}

pub fn mse_loss(pred: f64, target: f64) -> f64 {
    (pred - target) * (pred - target)
}

impl RankingHead {
    /// Relevance score of one candidate's `[CLS]` vector.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if self.weight.len() != x.len() {
            return Err(Error::Dimension {
                op: "rank_score",
                left: self.weight.shape().to_vec(),
                right: vec![x.len()],
            });
        }
        Ok(dot(self.weight.data(), x) + self.bias.data()[0])
    }
}

fn scaled_softmax(scores: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(contract("ranking needs at least one candidate"));
    }
    if !(gamma > 0.0) {
        return Err(contract(format!("ranking temperature must be positive, got {gamma}")));
    }
    let mut p: Vec<f64> = scores.iter().map(|s| gamma * s).collect();
    softmax_in_place(&mut p);
    Ok(p)
}

/// `−ln softmax(gamma·scores)[positive]`.
pub fn ranking_loss(scores: &[f64], positive: usize, gamma: f64) -> Result<f64> {
    if positive >= scores.len() {
        return Err(contract(format!(
            "positive index {positive} out of range for {} candidates",
            scores.len()
        )));
    }
    hard_ce_loss(&scaled_softmax(scores, gamma)?, positive)
}

/// `−Σ q[j] ln softmax(gamma·scores)[j]`.
pub fn soft_ranking_loss(scores: &[f64], q: &[f64], gamma: f64) -> Result<f64> {
    soft_ce_loss(&scaled_softmax(scores, gamma)?, q)
}
