//! Task-specific output layers and the loss functions over their outputs.

mod graph;
mod loss;

use std::fmt;
use std::str::FromStr;

use crate::encoder::Linear;
use crate::error::{contract, Error, Result};
use crate::numerics::{RngState, Tensor};

pub use graph::{batch_loss, Gold, LossConfig, RegressionTarget};
pub use loss::{
    check_distribution, classify, combined_loss, hard_ce_loss, mse_loss, ranking_loss, regress,
    soft_ce_loss, soft_ranking_loss, DISTRIBUTION_TOL,
};

/// Task name: non-empty, lowercase ASCII letters, digits, `_` or `-`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(String);

impl TaskId {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        let ok = !name.is_empty()
            && name
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-');
        if !ok {
            return Err(Error::Data(format!("invalid task id {name:?}")));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for TaskId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::new(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    SingleClassification,
    PairClassification,
    Regression,
    Ranking,
}

impl TaskKind {
    pub fn is_classification(self) -> bool {
        matches!(self, Self::SingleClassification | Self::PairClassification)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SingleClassification => "single_classification",
            Self::PairClassification => "pair_classification",
            Self::Regression => "regression",
            Self::Ranking => "ranking",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "single_classification" => Self::SingleClassification,
            "pair_classification" => Self::PairClassification,
            "regression" => Self::Regression,
            "ranking" => Self::Ranking,
            _ => return Err(Error::Data(format!("unknown task kind {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: TaskId,
    pub kind: TaskKind,
    /// Present exactly for classification kinds.
    pub n_classes: Option<usize>,
}

impl TaskSpec {
    pub fn new(id: TaskId, kind: TaskKind, n_classes: Option<usize>) -> Result<Self> {
        match (kind.is_classification(), n_classes) {
            (true, Some(n)) if n >= 2 => {}
            (false, None) => {}
            _ => {
                return Err(Error::Data(format!(
                    "task {id}: class count {n_classes:?} invalid for kind {kind}"
                )))
            }
        }
        Ok(Self { id, kind, n_classes })
    }

    /// Width of the head's output layer.
    pub fn output_width(&self) -> usize {
        self.n_classes.unwrap_or(1)
    }
}

/// `softmax(W x + b)` over `n_classes`; `W` is `n_classes×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// `w·x + b`; `w` is stored `1×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Candidate scorer `w·x + b`, softmaxed over a group at temperature `gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingHead {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Classification(ClassificationHead),
    Regression(RegressionHead),
    Ranking(RankingHead),
}

impl Head {
    /// Fresh head: `N(0, 1/hidden)` weights, zero bias, ranking temperature 1.
    pub fn init(spec: &TaskSpec, hidden: usize, rng: &mut RngState) -> Self {
        let Linear { weight, bias } = Linear::init(spec.output_width(), hidden, rng);
        match spec.kind {
            TaskKind::SingleClassification | TaskKind::PairClassification => {
                Head::Classification(ClassificationHead { weight, bias })
            }
            TaskKind::Regression => Head::Regression(RegressionHead { weight, bias }),
            TaskKind::Ranking => Head::Ranking(RankingHead {
                weight,
                bias,
                gamma: 1.0,
            }),
        }
    }

    /// Rebuilds a head from stored tensors, checking shapes against the spec.
    pub fn from_parts(spec: &TaskSpec, hidden: usize, weight: Tensor, bias: Tensor, gamma: f64) -> Result<Self> {
        let out = spec.output_width();
        if weight.shape() != [out, hidden] || bias.shape() != [out] {
            return Err(Error::Dimension {
                op: "head",
                left: weight.shape().to_vec(),
                right: vec![out, hidden],
            });
        }
        Ok(match spec.kind {
            TaskKind::SingleClassification | TaskKind::PairClassification => {
                Head::Classification(ClassificationHead { weight, bias })
            }
            TaskKind::Regression => Head::Regression(RegressionHead { weight, bias }),
            TaskKind::Ranking => {
                if !(gamma > 0.0 && gamma.is_finite()) {
                    return Err(contract(format!("ranking temperature must be positive, got {gamma}")));
                }
                Head::Ranking(RankingHead { weight, bias, gamma })
            }
        })
    }

    pub fn weight(&self) -> &Tensor {
        match self {
            Head::Classification(h) => &h.weight,
            Head::Regression(h) => &h.weight,
            Head::Ranking(h) => &h.weight,
        }
    }

    pub fn bias(&self) -> &Tensor {
        match self {
            Head::Classification(h) => &h.bias,
            Head::Regression(h) => &h.bias,
            Head::Ranking(h) => &h.bias,
        }
    }

    pub fn params_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        match self {
            Head::Classification(h) => (&mut h.weight, &mut h.bias),
            Head::Regression(h) => (&mut h.weight, &mut h.bias),
            Head::Ranking(h) => (&mut h.weight, &mut h.bias),
        }
    }

    /// Ranking temperature; 1 for other heads.
    pub fn gamma(&self) -> f64 {
        match self {
            Head::Ranking(h) => h.gamma,
            _ => 1.0,
        }
    }
}

/// Teacher output for one example.
#[derive(Clone, Debug, PartialEq)]
pub enum SoftPayload {
    ClassDist(Vec<f64>),
    RankDist(Vec<f64>),
    Score(f64),
}
