//! Tab-separated corpus files, one example per line.
//!
//! ```text
//! #mtdnn-corpus v1 task=relation kind=pair_classification classes=3
//! id	text1	text2	class
//! relation-train-00000	w41 w50	w50 w41 w57	0
//! ```
//!
//! Ranking candidates share one field, separated by U+001F.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::record::{ExampleRecord, Payload, Split, TaskDataset, TaskSplits};
use super::synthetic::Suite;
use crate::error::{Error, LineError, Result};
use crate::heads::{TaskId, TaskKind, TaskSpec};

pub const CORPUS_VERSION: u32 = 1;
const MAGIC: &str = "#mtdnn-corpus";
/// Separates ranking candidates within one field.
pub const CANDIDATE_SEP: char = '\u{1F}';

fn columns(kind: TaskKind) -> &'static [&'static str] {
    match kind {
        TaskKind::SingleClassification => &["id", "text", "class"],
        TaskKind::PairClassification => &["id", "text1", "text2", "class"],
        TaskKind::Regression => &["id", "text1", "text2", "score"],
        TaskKind::Ranking => &["id", "query", "candidates", "positive"],
    }
}

fn check_field(record: &str, field: &str) -> Result<()> {
    if field.contains(['\t', '\n', '\r', CANDIDATE_SEP]) {
        return Err(Error::Data(format!(
            "example {record}: field contains a tab, newline or candidate separator"
        )));
    }
    Ok(())
}

/// Serializes a dataset. Fails if a text contains a reserved character.
pub fn format_corpus(data: &TaskDataset) -> Result<String> {
    let spec = &data.spec;
    let mut out = format!("{MAGIC} v{CORPUS_VERSION} task={} kind={}", spec.id, spec.kind);
    if let Some(n) = spec.n_classes {
        out.push_str(&format!(" classes={n}"));
    }
    out.push('\n');
    out.push_str(&columns(spec.kind).join("\t"));
    out.push('\n');
    for e in &data.examples {
        let fields: Vec<String> = match &e.payload {
            Payload::Single { text, class } => vec![text.clone(), class.to_string()],
            Payload::Pair { text1, text2, class } => vec![text1.clone(), text2.clone(), class.to_string()],
            Payload::Regression { text1, text2, score } => vec![text1.clone(), text2.clone(), score.to_string()],
            Payload::Ranking {
                query,
                candidates,
                positive,
            } => {
                check_field(&e.id, query)?;
                for c in candidates {
                    check_field(&e.id, c)?;
                }
                let joined = candidates.join(&CANDIDATE_SEP.to_string());
                vec![query.clone(), joined, positive.to_string()]
            }
        };
        check_field(&e.id, &e.id)?;
        out.push_str(&e.id);
        for f in fields {
            if !matches!(e.payload, Payload::Ranking { .. }) {
                check_field(&e.id, &f)?;
            }
            out.push('\t');
            out.push_str(&f);
        }
        out.push('\n');
    }
    Ok(out)
}

fn parse_header(line: &str) -> std::result::Result<TaskSpec, String> {
    let mut parts = line.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(format!("expected `{MAGIC}` header"));
    }
    match parts.next() {
        Some(v) if v == format!("v{CORPUS_VERSION}") => {}
        Some(v) => return Err(format!("unsupported corpus version {v}")),
        None => return Err("missing version".into()),
    }
    let (mut task, mut kind, mut classes) = (None, None, None);
    for kv in parts {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("malformed header field `{kv}`"))?;
        match k {
            "task" => task = Some(v.parse::<TaskId>().map_err(|e| e.to_string())?),
            "kind" => kind = Some(v.parse::<TaskKind>().map_err(|e| e.to_string())?),
            "classes" => classes = Some(v.parse::<usize>().map_err(|_| format!("bad class count `{v}`"))?),
            _ => return Err(format!("unknown header field `{k}`")),
        }
    }
    let task = task.ok_or("header lacks task=")?;
    let kind = kind.ok_or("header lacks kind=")?;
    TaskSpec::new(task, kind, classes).map_err(|e| e.to_string())
}

fn parse_index(field: &str, what: &str) -> std::result::Result<usize, String> {
    field.parse().map_err(|_| format!("bad {what} `{field}`"))
}

fn parse_row(spec: &TaskSpec, line: &str) -> std::result::Result<ExampleRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    let want = columns(spec.kind).len();
    if fields.len() != want {
        return Err(format!("expected {want} columns, found {}", fields.len()));
    }
    let payload = match spec.kind {
        TaskKind::SingleClassification => Payload::Single {
            text: fields[1].into(),
            class: parse_index(fields[2], "class")?,
        },
        TaskKind::PairClassification => Payload::Pair {
            text1: fields[1].into(),
            text2: fields[2].into(),
            class: parse_index(fields[3], "class")?,
        },
        TaskKind::Regression => Payload::Regression {
            text1: fields[1].into(),
            text2: fields[2].into(),
            score: fields[3].parse().map_err(|_| format!("bad score `{}`", fields[3]))?,
        },
        TaskKind::Ranking => Payload::Ranking {
            query: fields[1].into(),
            candidates: fields[2].split(CANDIDATE_SEP).map(String::from).collect(),
            positive: parse_index(fields[3], "positive index")?,
        },
    };
    let record = ExampleRecord {
        id: fields[0].into(),
        task: spec.id.clone(),
        payload,
    };
    record.validate(spec).map_err(|e| e.to_string())?;
    Ok(record)
}

fn parse_error(errors: Vec<LineError>) -> Error {
    Error::Parse { what: "corpus", errors }
}

/// Parses a corpus file. Every malformed line is reported, not just the
/// first.
pub fn parse_corpus(text: &str) -> Result<TaskDataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let err = |line, message: String| parse_error(vec![LineError { line, message }]);
    let spec = match lines.next() {
        Some((n, l)) => parse_header(l).map_err(|m| err(n, m))?,
        None => return Err(err(1, "empty file".into())),
    };
    let want = columns(spec.kind).join("\t");
    match lines.next() {
        Some((_, l)) if l == want => {}
        Some((n, _)) => return Err(err(n, format!("expected column header `{}`", want.replace('\t', " | ")))),
        None => return Err(err(2, "missing column header".into())),
    }
    let mut errors = vec![];
    let mut examples = vec![];
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    for (n, line) in lines {
        match parse_row(&spec, line) {
            Ok(r) => match first_seen.entry(r.id.clone()) {
                Entry::Occupied(prev) => errors.push(LineError {
                    line: n,
                    message: format!("duplicate example id {} (first on line {})", r.id, prev.get()),
                }),
                Entry::Vacant(slot) => {
                    slot.insert(n);
                    examples.push(r);
                }
            },
            Err(message) => errors.push(LineError { line: n, message }),
        }
    }
    if !errors.is_empty() {
        return Err(parse_error(errors));
    }
    TaskDataset::new(spec, examples)
}

pub fn save_corpus(data: &TaskDataset, path: &Path) -> Result<()> {
    fs::write(path, format_corpus(data)?)?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<TaskDataset> {
    parse_corpus(&fs::read_to_string(path)?)
}

/// Path of one split inside a suite directory: `<dir>/<task>/<split>.tsv`.
pub fn split_path(dir: &Path, task: &TaskId, split: Split) -> std::path::PathBuf {
    dir.join(task.as_str()).join(format!("{split}.tsv"))
}

/// Writes every split of every task under `dir`.
pub fn save_suite(suite: &Suite, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut written = vec![];
    for (task, splits) in suite {
        fs::create_dir_all(dir.join(task.as_str()))?;
        for split in Split::ALL {
            let path = split_path(dir, task, split);
            save_corpus(splits.get(split), &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Reads a suite directory written by [`save_suite`]. Tasks are the
/// subdirectories of `dir`.
pub fn load_suite(dir: &Path) -> Result<Suite> {
    let mut names = vec![];
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    let mut suite = Suite::new();
    for name in names {
        let task: TaskId = name.parse()?;
        let load = |split| -> Result<TaskDataset> {
            let d = load_corpus(&split_path(dir, &task, split))?;
            if d.spec.id != task {
                return Err(Error::Data(format!("{split} file under {task} declares task {}", d.spec.id)));
            }
            Ok(d)
        };
        let (train, dev, test) = (load(Split::Train)?, load(Split::Dev)?, load(Split::Test)?);
        if train.spec != dev.spec || train.spec != test.spec {
            return Err(Error::Data(format!("splits of task {task} disagree on the task spec")));
        }
        suite.insert(task, TaskSplits { train, dev, test });
    }
    if suite.is_empty() {
        return Err(Error::Data(format!("no task directories under {}", dir.display())));
    }
    Ok(suite)
}
