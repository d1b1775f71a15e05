//! The checked-in fuzz seeds stay valid inputs for their parsers.

use std::fs;
use std::path::PathBuf;

use mtdnn::config::RunConfig;
use mtdnn::data::{parse_corpus, Checkpoint};
use mtdnn::distill::SoftTargetStore;
use sha2::{Digest, Sha256};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn corpus_seeds_parse() {
    for (p, b) in seeds("parse_corpus") {
        parse_corpus(std::str::from_utf8(&b).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn checkpoint_seeds_decode() {
    for (p, b) in seeds("checkpoint") {
        let ck = Checkpoint::from_bytes(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(ck.to_bytes().unwrap(), b);
    }
    for (p, mut b) in seeds("checkpoint_resealed") {
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        Checkpoint::from_bytes(&b).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn soft_target_seeds_parse() {
    for (p, b) in seeds("soft_targets") {
        let store = SoftTargetStore::parse(std::str::from_utf8(&b).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(store.to_text().as_bytes(), b);
    }
}

#[test]
fn config_seeds_cover_good_and_bad_input() {
    let results: Vec<bool> = seeds("run_config")
        .iter()
        .map(|(_, b)| RunConfig::from_text(std::str::from_utf8(b).unwrap()).is_ok())
        .collect();
    assert!(results.contains(&true) && results.contains(&false));
}
