use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::heads::{Gold, TaskId, TaskKind, TaskSpec};

/// Inclusive range of similarity scores.
pub const SCORE_RANGE: (f64, f64) = (0.0, 5.0);

/// Inputs and gold label of one example.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Single { text: String, class: usize },
    Pair { text1: String, text2: String, class: usize },
    Regression { text1: String, text2: String, score: f64 },
    Ranking { query: String, candidates: Vec<String>, positive: usize },
}

impl Payload {
    pub fn kind(&self) -> TaskKind {
        match self {
            Payload::Single { .. } => TaskKind::SingleClassification,
            Payload::Pair { .. } => TaskKind::PairClassification,
            Payload::Regression { .. } => TaskKind::Regression,
            Payload::Ranking { .. } => TaskKind::Ranking,
        }
    }

    pub fn gold(&self) -> Gold {
        match *self {
            Payload::Single { class, .. } | Payload::Pair { class, .. } => Gold::Class(class),
            Payload::Regression { score, .. } => Gold::Score(score),
            Payload::Ranking { positive, .. } => Gold::Rank(positive),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleRecord {
    pub id: String,
    pub task: TaskId,
    pub payload: Payload,
}

impl ExampleRecord {
    /// Checks the record against its task's spec.
    pub fn validate(&self, spec: &TaskSpec) -> Result<()> {
        let fail = |msg: String| Err(Error::Data(format!("example {}: {msg}", self.id)));
        if self.id.is_empty() || self.id.contains(|c: char| c.is_whitespace()) {
            return fail("example id must be non-empty without whitespace".into());
        }
        if self.task != spec.id {
            return fail(format!("belongs to task {}, not {}", self.task, spec.id));
        }
        if self.payload.kind() != spec.kind {
            return fail(format!("{} payload in a {} task", self.payload.kind(), spec.kind));
        }
        match &self.payload {
            Payload::Single { class, .. } | Payload::Pair { class, .. } => {
                let n = spec.n_classes.unwrap_or(0);
                if *class >= n {
                    return fail(format!("class {class} out of range for {n} classes"));
                }
            }
            Payload::Regression { score, .. } => {
                if !(SCORE_RANGE.0..=SCORE_RANGE.1).contains(score) {
                    return fail(format!("score {score} outside [0, 5]"));
                }
            }
            Payload::Ranking {
                candidates, positive, ..
            } => {
                if candidates.len() < 2 {
                    return fail("ranking needs at least two candidates".into());
                }
                if *positive >= candidates.len() {
                    return fail(format!("positive index {positive} out of range"));
                }
            }
        }
        Ok(())
    }
}

/// Every distinct lowercased token in the texts of `datasets`, sorted, after
/// the reserved tokens.
pub fn corpus_vocabulary(datasets: &[&TaskDataset]) -> Result<Vocabulary> {
    let mut words = BTreeSet::new();
    for d in datasets {
        for e in &d.examples {
            let texts: Vec<&str> = match &e.payload {
                Payload::Single { text, .. } => vec![text],
                Payload::Pair { text1, text2, .. } | Payload::Regression { text1, text2, .. } => vec![text1, text2],
                Payload::Ranking { query, candidates, .. } => {
                    std::iter::once(query.as_str()).chain(candidates.iter().map(String::as_str)).collect()
                }
            };
            for t in texts {
                words.extend(t.split_whitespace().map(str::to_lowercase));
            }
        }
    }
    let reserved = Vocabulary::new::<&str>(&[])?;
    let words: Vec<String> = words.into_iter().filter(|w| reserved.id(w).is_none()).collect();
    Vocabulary::new(&words)
}

/// All examples of one task split.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub examples: Vec<ExampleRecord>,
}

impl TaskDataset {
    /// Builds a dataset, validating every record and id uniqueness.
    pub fn new(spec: TaskSpec, examples: Vec<ExampleRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(examples.len());
        for e in &examples {
            e.validate(&spec)?;
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate example id {}", e.id)));
            }
        }
        Ok(Self { spec, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Train, dev and test data of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplits {
    pub train: TaskDataset,
    pub dev: TaskDataset,
    pub test: TaskDataset,
}

impl TaskSplits {
    pub fn spec(&self) -> &TaskSpec {
        &self.train.spec
    }

    pub fn get(&self, split: Split) -> &TaskDataset {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}
