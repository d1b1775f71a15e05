use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one artifact-producing command, written beside its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_clock_secs: f64,
    /// SHA-256 over the inputs' blob hashes, in path order.
    pub inputs_hash: String,
}

/// Content hash in git's object layout: `sha256("blob <len>\0" ++ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn walk(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            if e.file_name().is_some_and(|n| n != "manifest.json") {
                walk(&e, out)?;
            }
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Digests of every file at or under each path.
pub fn digest_paths(paths: &[&Path]) -> Result<Vec<FileDigest>, CliError> {
    let mut files = vec![];
    for p in paths {
        walk(p, &mut files)?;
    }
    files.sort();
    files
        .into_iter()
        .map(|f| {
            Ok(FileDigest {
                sha256: blob_hash(&fs::read(&f)?),
                path: f.display().to_string(),
            })
        })
        .collect()
}

pub struct ManifestBuilder {
    pub command: &'static str,
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            config: None,
            seed: None,
            inputs: vec![],
            outputs: vec![],
        }
    }

    /// Writes the manifest to `at`.
    pub fn write(self, at: &Path, elapsed: Duration) -> Result<(), CliError> {
        fn refs(v: &[PathBuf]) -> Vec<&Path> {
            v.iter().map(PathBuf::as_path).collect()
        }
        let inputs = digest_paths(&refs(&self.inputs))?;
        let outputs = digest_paths(&refs(&self.outputs))?;
        let mut h = Sha256::new();
        for d in &inputs {
            h.update(d.sha256.as_bytes());
        }
        let m = RunManifest {
            command: self.command.into(),
            args: std::env::args().skip(1).collect(),
            config: self.config,
            seed: self.seed,
            inputs,
            outputs,
            wall_clock_secs: elapsed.as_secs_f64(),
            inputs_hash: hex::encode(h.finalize()),
        };
        let json = serde_json::to_string_pretty(&m).map_err(|e| CliError::Io(std::io::Error::other(e)))?;
        fs::write(at, json + "\n")?;
        Ok(())
    }
}

/// `<file>.manifest.json` beside a file output.
pub fn beside(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
