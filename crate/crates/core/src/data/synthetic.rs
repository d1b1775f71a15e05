//! The four-task synthetic suite over the closed 60-word vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use super::record::{ExampleRecord, Payload, Split, TaskDataset, TaskSplits};
use crate::encoder::Vocabulary;
use crate::error::{contract, Error, Result};
use crate::heads::{TaskId, TaskKind, TaskSpec};
use crate::numerics::RngState;

/// Keyword-presence sentence classification (2 classes).
pub const KEYWORD_TASK: &str = "keyword";
/// Token-set relation between two sentences (3 classes).
pub const RELATION_TASK: &str = "relation";
/// Jaccard similarity regression on `[0, 5]`.
pub const SIMILARITY_TASK: &str = "similarity";
/// Pick the candidate sharing the most tokens with the query.
pub const RELEVANCE_TASK: &str = "relevance";

/// Tokens whose presence makes a keyword-task sentence positive.
pub const KEYWORDS: [&str; 3] = ["w00", "w01", "w02"];
/// Candidates per ranking example.
pub const RANKING_CANDIDATES: usize = 4;

const WORDS: usize = 60;
/// Words the overlap tasks draw from; disjoint from the keywords.
const OVERLAP_POOL: std::ops::Range<usize> = 40..WORDS;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            dev: 200,
            test: 200,
        }
    }
}

impl SuiteSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

pub type Suite = BTreeMap<TaskId, TaskSplits>;

/// Task specs of the suite, in generation order.
pub fn suite_specs() -> Vec<TaskSpec> {
    let spec = |name: &str, kind, n| TaskSpec::new(TaskId::new(name).expect("static id"), kind, n).expect("static spec");
    vec![
        spec(KEYWORD_TASK, TaskKind::SingleClassification, Some(2)),
        spec(RELATION_TASK, TaskKind::PairClassification, Some(3)),
        spec(SIMILARITY_TASK, TaskKind::Regression, None),
        spec(RELEVANCE_TASK, TaskKind::Ranking, None),
    ]
}

fn word(i: usize) -> String {
    format!("w{i:02}")
}

fn words_of(text: &str) -> BTreeSet<&str> {
    text.split_whitespace().collect()
}

/// 1 if any keyword occurs in `text`.
pub fn keyword_label(text: &str) -> usize {
    usize::from(text.split_whitespace().any(|w| KEYWORDS.contains(&w)))
}

/// 0 if the tokens of `s1` are a subset of those of `s2`, 1 if disjoint,
/// 2 otherwise.
pub fn relation_label(s1: &str, s2: &str) -> usize {
    let (a, b) = (words_of(s1), words_of(s2));
    if a.is_subset(&b) {
        0
    } else if a.is_disjoint(&b) {
        1
    } else {
        2
    }
}

/// `5·|A∩B| / |A∪B|` over token sets.
pub fn similarity_score(s1: &str, s2: &str) -> f64 {
    let (a, b) = (words_of(s1), words_of(s2));
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    5.0 * a.intersection(&b).count() as f64 / union as f64
}

/// Index of the candidate with the strictly largest token overlap with the
/// query, if unique.
pub fn relevance_positive(query: &str, candidates: &[String]) -> Option<usize> {
    let q = words_of(query);
    let overlaps: Vec<usize> = candidates
        .iter()
        .map(|c| words_of(c).intersection(&q).count())
        .collect();
    let best = *overlaps.iter().max()?;
    let mut at = overlaps.iter().enumerate().filter(|(_, &o)| o == best).map(|(i, _)| i);
    match (at.next(), at.next()) {
        (Some(i), None) => Some(i),
        _ => None,
    }
}

struct Sampler<'a> {
    rng: &'a mut RngState,
}

impl Sampler<'_> {
    fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.rng.below(hi - lo + 1)
    }

    /// `n` distinct word indices from `pool`.
    fn distinct(&mut self, pool: &[usize], n: usize) -> Vec<usize> {
        let mut p = pool.to_vec();
        self.rng.shuffle(&mut p);
        p.truncate(n);
        p
    }

    fn text(&mut self, mut ids: Vec<usize>) -> String {
        self.rng.shuffle(&mut ids);
        ids.into_iter().map(word).collect::<Vec<_>>().join(" ")
    }
}

fn all_words() -> Vec<usize> {
    OVERLAP_POOL.collect()
}

fn complement(of: &[usize]) -> Vec<usize> {
    OVERLAP_POOL.filter(|i| !of.contains(i)).collect()
}

fn gen_keyword(s: &mut Sampler) -> Payload {
    let class = s.range(0, 1);
    let len = s.range(4, 8);
    let plain: Vec<usize> = (KEYWORDS.len()..WORDS).collect();
    let mut ids: Vec<usize> = (0..len).map(|_| plain[s.rng.below(plain.len())]).collect();
    if class == 1 {
        for _ in 0..s.range(1, 2) {
            let at = s.rng.below(len);
            ids[at] = s.rng.below(KEYWORDS.len());
        }
    }
    let text = s.text(ids);
    Payload::Single {
        class: keyword_label(&text),
        text,
    }
}

fn gen_relation(s: &mut Sampler) -> Payload {
    let class = s.range(0, 2);
    let n2 = s.range(2, 4);
    let b = s.distinct(&all_words(), n2);
    let outside = complement(&b);
    let a = match class {
        0 => {
            let n = s.range(1, 2);
            s.distinct(&b, n)
        }
        1 => {
            let n = s.range(1, 2);
            s.distinct(&outside, n)
        }
        _ => {
            let mut a = s.distinct(&b, 1);
            a.extend(s.distinct(&outside, 1));
            a
        }
    };
    let (text1, text2) = (s.text(a), s.text(b));
    Payload::Pair {
        class: relation_label(&text1, &text2),
        text1,
        text2,
    }
}

fn gen_similarity(s: &mut Sampler) -> Payload {
    let n1 = s.range(2, 4);
    let a = s.distinct(&all_words(), n1);
    let shared = s.range(0, n1);
    let mut extra = s.range(0, 2);
    if shared == 0 && extra == 0 {
        extra = 1;
    }
    let mut b = s.distinct(&a, shared);
    b.extend(s.distinct(&complement(&a), extra));
    let (text1, text2) = (s.text(a), s.text(b));
    Payload::Regression {
        score: similarity_score(&text1, &text2),
        text1,
        text2,
    }
}

fn gen_relevance(s: &mut Sampler) -> Payload {
    let nq = s.range(2, 4);
    let q = s.distinct(&all_words(), nq);
    let outside = complement(&q);
    let best = s.range(1, nq);
    let positive = s.rng.below(RANKING_CANDIDATES);
    let candidates: Vec<String> = (0..RANKING_CANDIDATES)
        .map(|i| {
            let overlap = if i == positive { best } else { s.range(0, best - 1) };
            let len = s.range(overlap.max(2), 4.max(overlap));
            let mut c = s.distinct(&q, overlap);
            c.extend(s.distinct(&outside, len - overlap));
            s.text(c)
        })
        .collect();
    let query = s.text(q);
    let positive = relevance_positive(&query, &candidates).expect("positive overlap is a unique maximum");
    Payload::Ranking {
        query,
        candidates,
        positive,
    }
}

fn dedup_key(p: &Payload) -> String {
    match p {
        Payload::Single { text, .. } => text.clone(),
        Payload::Pair { text1, text2, .. } | Payload::Regression { text1, text2, .. } => format!("{text1}|{text2}"),
        Payload::Ranking { query, candidates, .. } => format!("{query}|{}", candidates.join("|")),
    }
}

/// Generates the suite. Identical seeds give identical suites; no input
/// occurs in more than one split of a task.
pub fn gen_synthetic_suite(seed: u64, sizes: SuiteSizes) -> Result<Suite> {
    if sizes.train == 0 || sizes.dev == 0 || sizes.test == 0 {
        return Err(contract("split sizes must be at least 1"));
    }
    let root = RngState::new(seed);
    let mut suite = Suite::new();
    for (t, spec) in suite_specs().into_iter().enumerate() {
        let mut rng = root.fork(t as u64);
        let mut sampler = Sampler { rng: &mut rng };
        let gen: fn(&mut Sampler) -> Payload = match spec.kind {
            TaskKind::SingleClassification => gen_keyword,
            TaskKind::PairClassification => gen_relation,
            TaskKind::Regression => gen_similarity,
            TaskKind::Ranking => gen_relevance,
        };
        let mut seen = HashSet::new();
        let mut splits = Vec::with_capacity(3);
        for split in Split::ALL {
            let mut examples = Vec::with_capacity(sizes.get(split));
            for i in 0..sizes.get(split) {
                let payload = (0..MAX_ATTEMPTS)
                    .map(|_| gen(&mut sampler))
                    .find(|p| seen.insert(dedup_key(p)))
                    .ok_or_else(|| Error::Data(format!("task {}: ran out of distinct examples", spec.id)))?;
                examples.push(ExampleRecord {
                    id: format!("{}-{}-{i:05}", spec.id, split),
                    task: spec.id.clone(),
                    payload,
                });
            }
            splits.push(TaskDataset::new(spec.clone(), examples)?);
        }
        let mut it = splits.into_iter();
        let (train, dev, test) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        suite.insert(spec.id.clone(), TaskSplits { train, dev, test });
    }
    Ok(suite)
}

/// The vocabulary every suite text is drawn from.
pub fn suite_vocabulary() -> Vocabulary {
    Vocabulary::synthetic()
}
