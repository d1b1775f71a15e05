//! Batch losses recorded on the tape.

use std::collections::BTreeMap;

use super::loss::check_distribution;
use super::{SoftPayload, TaskKind, TaskSpec};
use crate::error::{contract, Error, Result};
use crate::numerics::{Tape, Var};

/// Gold label of one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gold {
    Class(usize),
    Score(f64),
    /// Index of the positive candidate within its group.
    Rank(usize),
}

/// What a regression student is fitted to when a teacher score exists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RegressionTarget {
    /// Squared error against the teacher score only.
    #[default]
    Teacher,
    /// `alpha·(pred − gold)² + (1−alpha)·(pred − teacher)²`.
    Blend,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the hard-label term.
    pub alpha: f64,
    pub regression: RegressionTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            regression: RegressionTarget::Teacher,
        }
    }
}

fn one_hot(width: usize, hot: &[usize]) -> Vec<f64> {
    let mut t = vec![0.0; width * hot.len()];
    for (r, &c) in hot.iter().enumerate() {
        t[r * width + c] = 1.0;
    }
    t
}

/// `alpha·hard + (1−alpha)·soft`, elementwise over per-example losses.
fn mix(tape: &mut Tape, hard: Var, soft: Var, alpha: f64) -> Result<Var> {
    let h = tape.scale(hard, alpha);
    let s = tape.scale(soft, 1.0 - alpha);
    tape.add(h, s)
}

fn label_mismatch(kind: TaskKind, gold: &Gold) -> Error {
    contract(format!("label {gold:?} does not fit a {kind} task"))
}

fn payload_mismatch(kind: TaskKind, p: &SoftPayload) -> Error {
    Error::Data(format!("teacher payload {p:?} does not fit a {kind} task"))
}

/// Mean per-example loss of one single-task batch.
///
/// `outputs` are the head outputs: `n×C` logits for classification, `n×1`
/// predictions for regression, and one score row per candidate for ranking,
/// with `groups[i]` candidates for example `i`. With `soft` present every
/// example is scored against its teacher payload as well.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    tape: &mut Tape,
    outputs: Var,
    spec: &TaskSpec,
    gamma: f64,
    groups: &[usize],
    gold: &[Gold],
    soft: Option<&[&SoftPayload]>,
    cfg: &LossConfig,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(contract(format!("alpha must be in [0, 1], got {}", cfg.alpha)));
    }
    let n = gold.len();
    if n == 0 {
        return Err(contract("empty batch"));
    }
    if soft.is_some_and(|s| s.len() != n) {
        return Err(contract("teacher payloads do not match the batch"));
    }
    let (rows, width) = tape.value(outputs).dims2()?;
    match spec.kind {
        TaskKind::SingleClassification | TaskKind::PairClassification => {
            if rows != n || Some(width) != spec.n_classes {
                return Err(contract("classification outputs do not match the batch"));
            }
            let classes = gold
                .iter()
                .map(|g| match *g {
                    Gold::Class(c) if c < width => Ok(c),
                    _ => Err(label_mismatch(spec.kind, g)),
                })
                .collect::<Result<Vec<_>>>()?;
            let hard = tape.cross_entropy(outputs, one_hot(width, &classes))?;
            let per_example = match soft {
                None => hard,
                Some(soft) => {
                    let mut q = Vec::with_capacity(n * width);
                    for p in soft {
                        match p {
                            SoftPayload::ClassDist(d) => {
                                check_distribution(d, width)?;
                                q.extend_from_slice(d);
                            }
                            other => return Err(payload_mismatch(spec.kind, other)),
                        }
                    }
                    let s = tape.cross_entropy(outputs, q)?;
                    mix(tape, hard, s, cfg.alpha)?
                }
            };
            Ok(tape.mean(per_example))
        }
        TaskKind::Regression => {
            if rows != n || width != 1 {
                return Err(contract("regression outputs do not match the batch"));
            }
            let targets = gold
                .iter()
                .map(|g| match *g {
                    Gold::Score(s) if s.is_finite() => Ok(s),
                    _ => Err(label_mismatch(spec.kind, g)),
                })
                .collect::<Result<Vec<_>>>()?;
            let per_example = match soft {
                None => tape.squared_error(outputs, targets)?,
                Some(soft) => {
                    let teacher = soft
                        .iter()
                        .map(|p| match p {
                            SoftPayload::Score(s) if s.is_finite() => Ok(*s),
                            other => Err(payload_mismatch(spec.kind, other)),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let t = tape.squared_error(outputs, teacher)?;
                    match cfg.regression {
                        RegressionTarget::Teacher => t,
                        RegressionTarget::Blend => {
                            let g = tape.squared_error(outputs, targets)?;
                            mix(tape, g, t, cfg.alpha)?
                        }
                    }
                }
            };
            Ok(tape.mean(per_example))
        }
        TaskKind::Ranking => {
            if groups.len() != n || width != 1 || groups.iter().sum::<usize>() != rows {
                return Err(contract("ranking outputs do not match the candidate groups"));
            }
            // Examples are bucketed by group size so each bucket is one
            // rectangular softmax.
            let mut offsets = Vec::with_capacity(n);
            let mut at = 0;
            for &k in groups {
                if k == 0 {
                    return Err(contract("ranking group with no candidates"));
                }
                offsets.push(at);
                at += k;
            }
            let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &k) in groups.iter().enumerate() {
                buckets.entry(k).or_default().push(i);
            }
            let single = buckets.len() == 1;
            let mut total: Option<Var> = None;
            for (&k, members) in &buckets {
                let scores = if single {
                    outputs
                } else {
                    let rows = members.iter().flat_map(|&i| offsets[i]..offsets[i] + k).collect();
                    tape.gather(outputs, rows)?
                };
                let scores = tape.reshape(scores, vec![members.len(), k])?;
                let scores = tape.scale(scores, gamma);
                let positives = members
                    .iter()
                    .map(|&i| match gold[i] {
                        Gold::Rank(p) if p < k => Ok(p),
                        ref g => Err(label_mismatch(spec.kind, g)),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let hard = tape.cross_entropy(scores, one_hot(k, &positives))?;
                let per_example = match soft {
                    None => hard,
                    Some(soft) => {
                        let mut q = Vec::with_capacity(members.len() * k);
                        for &i in members {
                            match soft[i] {
                                SoftPayload::RankDist(d) => {
                                    check_distribution(d, k)?;
                                    q.extend_from_slice(d);
                                }
                                other => return Err(payload_mismatch(spec.kind, other)),
                            }
                        }
                        let s = tape.cross_entropy(scores, q)?;
                        mix(tape, hard, s, cfg.alpha)?
                    }
                };
                if single {
                    return Ok(tape.mean(per_example));
                }
                let s = tape.sum(per_example);
                total = Some(match total {
                    None => s,
                    Some(t) => tape.add(t, s)?,
                });
            }
            let total = total.expect("at least one bucket");
            Ok(tape.scale(total, 1.0 / n as f64))
        }
    }
}
