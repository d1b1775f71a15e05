//! Soft-target files.
//!
//! ```text
//! #mtdnn-soft v1
//! #source relation/member0 3f5a...
//! task	example	kind	values
//! relation	relation-train-00000	class	9.0000000000000002e-1,5.0000000000000003e-2,5.0000000000000003e-2
//! ```
//!
//! Values carry 17 significant digits, enough to round-trip every f64.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::data::TaskDataset;
use crate::error::{Error, LineError, Result};
use crate::heads::{check_distribution, SoftPayload, TaskId, TaskKind, TaskSpec};

pub const SOFT_VERSION: u32 = 1;
const MAGIC: &str = "#mtdnn-soft";
const COLUMNS: &str = "task\texample\tkind\tvalues";

/// Teacher payloads by task and example id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SoftTargetStore {
    tasks: BTreeMap<TaskId, BTreeMap<String, SoftPayload>>,
    /// Label → hex digest of each model that produced the targets.
    sources: BTreeMap<String, String>,
}

fn kind_name(p: &SoftPayload) -> &'static str {
    match p {
        SoftPayload::ClassDist(_) => "class",
        SoftPayload::RankDist(_) => "rank",
        SoftPayload::Score(_) => "score",
    }
}

fn fits(kind: TaskKind, p: &SoftPayload) -> bool {
    matches!(
        (kind, p),
        (TaskKind::SingleClassification | TaskKind::PairClassification, SoftPayload::ClassDist(_))
            | (TaskKind::Ranking, SoftPayload::RankDist(_))
            | (TaskKind::Regression, SoftPayload::Score(_))
    )
}

fn validate_payload(p: &SoftPayload) -> Result<()> {
    match p {
        SoftPayload::ClassDist(q) | SoftPayload::RankDist(q) => check_distribution(q, q.len()),
        SoftPayload::Score(s) if s.is_finite() => Ok(()),
        SoftPayload::Score(s) => Err(Error::Data(format!("teacher score {s} is not finite"))),
    }
}

impl SoftTargetStore {
    /// Adds one payload; it must fit the task and be a valid distribution.
    pub fn insert(&mut self, spec: &TaskSpec, example: &str, payload: SoftPayload) -> Result<()> {
        if !fits(spec.kind, &payload) {
            return Err(Error::Data(format!("{} payload for {} task {}", kind_name(&payload), spec.kind, spec.id)));
        }
        if let Some(n) = spec.n_classes {
            if let SoftPayload::ClassDist(q) = &payload {
                check_distribution(q, n)?;
            }
        }
        self.insert_unchecked_kind(spec.id.clone(), example, payload)
    }

    fn insert_unchecked_kind(&mut self, task: TaskId, example: &str, payload: SoftPayload) -> Result<()> {
        if example.is_empty() || example.contains(char::is_whitespace) {
            return Err(Error::Data(format!("bad example id {example:?}")));
        }
        validate_payload(&payload)?;
        let per_task = self.tasks.entry(task.clone()).or_default();
        if per_task.insert(example.to_string(), payload).is_some() {
            return Err(Error::Data(format!("task {task}: two payloads for example {example}")));
        }
        Ok(())
    }

    pub fn add_source(&mut self, label: String, digest: String) -> Result<()> {
        if label.is_empty() || label.contains(char::is_whitespace) || digest.contains(char::is_whitespace) {
            return Err(Error::Data(format!("bad source label {label:?}")));
        }
        self.sources.insert(label, digest);
        Ok(())
    }

    pub fn sources(&self) -> &BTreeMap<String, String> {
        &self.sources
    }

    pub fn get(&self, task: &TaskId, example: &str) -> Option<&SoftPayload> {
        self.tasks.get(task)?.get(example)
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &TaskId> {
        self.tasks.keys()
    }

    pub fn has_task(&self, task: &TaskId) -> bool {
        self.tasks.contains_key(task)
    }

    /// Payload count for one task.
    pub fn len(&self, task: &TaskId) -> usize {
        self.tasks.get(task).map_or(0, BTreeMap::len)
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.values().all(BTreeMap::is_empty)
    }

    /// Payloads in dataset order. Every example needs a payload and every
    /// stored payload of the task must name an example of `data`.
    pub fn payloads_for(&self, data: &TaskDataset) -> Result<Vec<SoftPayload>> {
        let task = &data.spec.id;
        let stored = self
            .tasks
            .get(task)
            .ok_or_else(|| Error::Data(format!("no soft targets for task {task}")))?;
        let out = data
            .examples
            .iter()
            .map(|e| {
                let p = stored
                    .get(&e.id)
                    .ok_or_else(|| Error::Data(format!("task {task}: missing soft target for example {}", e.id)))?;
                if !fits(data.spec.kind, p) {
                    return Err(Error::Data(format!("task {task}: example {} has a {} payload", e.id, kind_name(p))));
                }
                Ok(p.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        if stored.len() != out.len() {
            let ids: std::collections::HashSet<&str> = data.examples.iter().map(|e| e.id.as_str()).collect();
            let extra = stored.keys().find(|k| !ids.contains(k.as_str())).expect("a stored id is unmatched");
            return Err(Error::Data(format!("task {task}: soft target for unknown example {extra}")));
        }
        Ok(out)
    }

    /// Serialized form; identical stores give identical bytes.
    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC} v{SOFT_VERSION}\n");
        for (label, digest) in &self.sources {
            s.push_str(&format!("#source {label} {digest}\n"));
        }
        s.push_str(COLUMNS);
        s.push('\n');
        for (task, examples) in &self.tasks {
            for (id, p) in examples {
                let values: Vec<String> = match p {
                    SoftPayload::ClassDist(q) | SoftPayload::RankDist(q) => q.iter().map(|v| format!("{v:.16e}")).collect(),
                    SoftPayload::Score(v) => vec![format!("{v:.16e}")],
                };
                s.push_str(&format!("{task}\t{id}\t{}\t{}\n", kind_name(p), values.join(",")));
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            what: "soft targets",
            errors: vec![LineError { line, message }],
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == format!("{MAGIC} v{SOFT_VERSION}") => {}
            Some((n, l)) if l.starts_with(MAGIC) => return Err(err(n, format!("unsupported version `{l}`"))),
            _ => return Err(err(1, format!("expected `{MAGIC} v{SOFT_VERSION}`"))),
        }
        let mut store = Self::default();
        let mut errors = vec![];
        let mut header_done = false;
        let mut seen: HashMap<(String, String), usize> = HashMap::new();
        for (n, line) in lines {
            if !header_done {
                if let Some(rest) = line.strip_prefix("#source ") {
                    match rest.split_once(' ') {
                        Some((label, digest)) => {
                            if let Err(e) = store.add_source(label.into(), digest.into()) {
                                errors.push(LineError { line: n, message: e.to_string() });
                            }
                        }
                        None => errors.push(LineError { line: n, message: "source line lacks a digest".into() }),
                    }
                    continue;
                }
                if line != COLUMNS {
                    return Err(err(n, "expected the column header".into()));
                }
                header_done = true;
                continue;
            }
            let parsed = parse_row(line).and_then(|(task, id, payload)| {
                match seen.entry((task.to_string(), id.clone())) {
                    Entry::Occupied(prev) => {
                        return Err(format!("duplicate payload for {task}/{id} (first on line {})", prev.get()))
                    }
                    Entry::Vacant(v) => {
                        v.insert(n);
                    }
                }
                store.insert_unchecked_kind(task, &id, payload).map_err(|e| e.to_string())
            });
            if let Err(message) = parsed {
                errors.push(LineError { line: n, message });
            }
        }
        if !header_done {
            return Err(err(text.lines().count().max(1), "missing column header".into()));
        }
        if !errors.is_empty() {
            return Err(Error::Parse { what: "soft targets", errors });
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

fn parse_row(line: &str) -> std::result::Result<(TaskId, String, SoftPayload), String> {
    let f: Vec<&str> = line.split('\t').collect();
    let [task, id, kind, values] = f[..] else {
        return Err(format!("expected 4 columns, found {}", f.len()));
    };
    let task: TaskId = task.parse().map_err(|e: Error| e.to_string())?;
    let values = values
        .split(',')
        .map(|v| v.parse::<f64>().map_err(|_| format!("bad value `{v}`")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let payload = match (kind, values.len()) {
        ("class", _) => SoftPayload::ClassDist(values),
        ("rank", _) => SoftPayload::RankDist(values),
        ("score", 1) => SoftPayload::Score(values[0]),
        ("score", n) => return Err(format!("score payload with {n} values")),
        _ => return Err(format!("unknown payload kind `{kind}`")),
    };
    Ok((task, id.to_string(), payload))
}
