//! Model, optimizer and RNG snapshots.
//!
//! A checkpoint is a line-oriented text header terminated by `end`, a binary
//! section of little-endian f64 values in header order, and a trailing
//! SHA-256 of everything before it.
//!
//! ```text
//! mtdnn-checkpoint v1
//! encoding f64-le
//! config hidden=32 layers=2 heads=4 ffn_width=64 max_len=64 vocab_size=64 dropout_rate=0
//! vocab [PAD] [UNK] [CLS] [SEP] w00 ...
//! task relevance ranking - 1
//! rng 7 1234
//! progress 1 250
//! optimizer 0.9 0.999 0.00000001
//! tensor encoder.word 64,32
//! slot encoder.word 250 2048
//! meta role teacher
//! end
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, EncoderParams, Vocabulary};
use crate::error::{Error, Result};
use crate::heads::{Head, TaskId, TaskKind, TaskSpec};
use crate::model::{ModelState, TaskHead};
use crate::mtl::Progress;
use crate::numerics::{Adamax, AdamaxSlot, RngState, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "mtdnn-checkpoint";
const ENCODING: &str = "f64-le";
const DIGEST_LEN: usize = 32;

/// Everything needed to continue a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub optimizer: Adamax,
    pub rng: RngState,
    pub progress: Progress,
    /// Free-form single-line annotations.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    /// A checkpoint of a model alone, with fresh optimizer state.
    pub fn of_model(model: ModelState) -> Self {
        Self {
            model,
            optimizer: Adamax::default(),
            rng: RngState::new(0),
            progress: Progress::default(),
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode(bytes)
    }
}

fn load_err(msg: impl Into<String>) -> Error {
    Error::Load(msg.into())
}

fn single_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Data(format!("{what} {s:?} must be a non-empty token without whitespace")));
    }
    Ok(())
}

fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let m = &ck.model;
    let c = &m.config;
    let mut h = String::new();
    h.push_str(&format!("{MAGIC} v{CHECKPOINT_VERSION}\nencoding {ENCODING}\n"));
    h.push_str(&format!(
        "config hidden={} layers={} heads={} ffn_width={} max_len={} vocab_size={} dropout_rate={}\n",
        c.hidden, c.layers, c.heads, c.ffn_width, c.max_len, c.vocab_size, c.dropout_rate
    ));
    h.push_str(&format!("vocab {}\n", m.vocab.tokens().join(" ")));
    for (id, th) in &m.heads {
        let classes = th.spec.n_classes.map_or("-".to_string(), |n| n.to_string());
        h.push_str(&format!("task {id} {} {classes} {}\n", th.spec.kind, th.head.gamma()));
    }
    h.push_str(&format!("rng {} {}\n", ck.rng.seed, ck.rng.counter));
    h.push_str(&format!("progress {} {}\n", ck.progress.epochs_done, ck.progress.global_step));
    let o = &ck.optimizer;
    h.push_str(&format!("optimizer {} {} {}\n", o.beta1, o.beta2, o.eps));
    let params = m.named_params();
    for (name, t) in &params {
        let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
        h.push_str(&format!("tensor {name} {}\n", dims.join(",")));
    }
    for (name, slot) in &o.slots {
        single_token("optimizer slot", name)?;
        if slot.m.len() != slot.u.len() {
            return Err(Error::Data(format!("optimizer slot {name} has mismatched moments")));
        }
        h.push_str(&format!("slot {name} {} {}\n", slot.step, slot.m.len()));
    }
    for (k, v) in &ck.meta {
        single_token("meta key", k)?;
        if v.contains(['\n', '\r']) {
            return Err(Error::Data(format!("meta value for {k} spans lines")));
        }
        h.push_str(&format!("meta {k} {v}\n"));
    }
    h.push_str("end\n");

    let mut out = h.into_bytes();
    let values = params.iter().flat_map(|(_, t)| t.data().iter());
    let moments = o.slots.values().flat_map(|s| s.m.iter().chain(s.u.iter()));
    for v in values.chain(moments) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Header {
    config: Option<EncoderConfig>,
    vocab: Option<Vocabulary>,
    tasks: Vec<(TaskSpec, f64)>,
    rng: Option<RngState>,
    progress: Option<Progress>,
    optimizer: Option<(f64, f64, f64)>,
    tensors: Vec<(String, Vec<usize>)>,
    slots: Vec<(String, u64, usize)>,
    meta: BTreeMap<String, String>,
}

fn num<T: std::str::FromStr>(field: &str, what: &str) -> Result<T> {
    field.parse().map_err(|_| load_err(format!("bad {what} `{field}`")))
}

fn parse_config(fields: &[&str]) -> Result<EncoderConfig> {
    let mut kv = HashMap::new();
    for f in fields {
        let (k, v) = f.split_once('=').ok_or_else(|| load_err(format!("bad config field `{f}`")))?;
        if kv.insert(k, v).is_some() {
            return Err(load_err(format!("config field {k} repeated")));
        }
    }
    let mut get = |k: &str| kv.remove(k).ok_or_else(|| load_err(format!("config lacks {k}")));
    let config = EncoderConfig {
        hidden: num(get("hidden")?, "hidden")?,
        layers: num(get("layers")?, "layers")?,
        heads: num(get("heads")?, "heads")?,
        ffn_width: num(get("ffn_width")?, "ffn_width")?,
        max_len: num(get("max_len")?, "max_len")?,
        vocab_size: num(get("vocab_size")?, "vocab_size")?,
        dropout_rate: num(get("dropout_rate")?, "dropout_rate")?,
    };
    if let Some(k) = kv.keys().next() {
        return Err(load_err(format!("unknown config field {k}")));
    }
    config.validate().map_err(|e| load_err(e.to_string()))?;
    Ok(config)
}

fn parse_header(lines: &[&str]) -> Result<Header> {
    let mut h = Header {
        config: None,
        vocab: None,
        tasks: vec![],
        rng: None,
        progress: None,
        optimizer: None,
        tensors: vec![],
        slots: vec![],
        meta: BTreeMap::new(),
    };
    fn once<T>(slot: &mut Option<T>, v: T, what: &str) -> Result<()> {
        if slot.replace(v).is_some() {
            return Err(load_err(format!("{what} line repeated")));
        }
        Ok(())
    }
    for line in lines {
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            if h.meta.insert(k.to_string(), v.to_string()).is_some() {
                return Err(load_err(format!("meta key {k} repeated")));
            }
            continue;
        }
        let f: Vec<&str> = line.split(' ').collect();
        match (f[0], f.len()) {
            ("config", _) => once(&mut h.config, parse_config(&f[1..])?, "config")?,
            ("vocab", _) => {
                let tokens = f[1..].iter().map(|s| s.to_string()).collect();
                let v = Vocabulary::from_tokens(tokens).map_err(|e| load_err(e.to_string()))?;
                once(&mut h.vocab, v, "vocab")?
            }
            ("task", 5) => {
                let id: TaskId = f[1].parse().map_err(|e: Error| load_err(e.to_string()))?;
                let kind: TaskKind = f[2].parse().map_err(|e: Error| load_err(e.to_string()))?;
                let classes = if f[3] == "-" { None } else { Some(num(f[3], "class count")?) };
                let spec = TaskSpec::new(id, kind, classes).map_err(|e| load_err(e.to_string()))?;
                h.tasks.push((spec, num(f[4], "ranking temperature")?));
            }
            ("rng", 3) => once(
                &mut h.rng,
                RngState {
                    seed: num(f[1], "rng seed")?,
                    counter: num(f[2], "rng counter")?,
                },
                "rng",
            )?,
            ("progress", 3) => once(
                &mut h.progress,
                Progress {
                    epochs_done: num(f[1], "epoch count")?,
                    global_step: num(f[2], "step count")?,
                },
                "progress",
            )?,
            ("optimizer", 4) => once(
                &mut h.optimizer,
                (num(f[1], "beta1")?, num(f[2], "beta2")?, num(f[3], "eps")?),
                "optimizer",
            )?,
            ("tensor", 3) => {
                let dims = f[2]
                    .split(',')
                    .map(|d| match num::<usize>(d, "extent")? {
                        0 => Err(load_err(format!("tensor {} has a zero extent", f[1]))),
                        n => Ok(n),
                    })
                    .collect::<Result<Vec<_>>>()?;
                h.tensors.push((f[1].to_string(), dims));
            }
            ("slot", 4) => h.slots.push((f[1].to_string(), num(f[2], "slot step")?, num(f[3], "slot length")?)),
            _ => return Err(load_err(format!("unrecognized header line `{line}`"))),
        }
    }
    Ok(h)
}

/// Splits off the header lines, checking the version lines. Returns the
/// lines between them and `end`, and the offset of the binary section.
fn split_header(body: &[u8]) -> Result<(Vec<&str>, usize)> {
    let mut lines = vec![];
    let mut at = 0;
    loop {
        let nl = body[at..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| load_err("header is not terminated"))?;
        let line = std::str::from_utf8(&body[at..at + nl]).map_err(|_| load_err("header is not UTF-8"))?;
        at += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line);
    }
    match lines.first() {
        Some(&l) if l == format!("{MAGIC} v{CHECKPOINT_VERSION}") => {}
        Some(l) if l.starts_with(MAGIC) => return Err(load_err(format!("unsupported checkpoint version `{l}`"))),
        _ => return Err(load_err("not a checkpoint")),
    }
    if lines.get(1) != Some(&&*format!("encoding {ENCODING}")) {
        return Err(load_err(format!("expected `encoding {ENCODING}` on line 2")));
    }
    lines.drain(..2);
    Ok((lines, at))
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < DIGEST_LEN {
        return Err(load_err("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(load_err("checksum mismatch (truncated or corrupted file)"));
    }
    let (lines, start) = split_header(body)?;
    let h = parse_header(&lines)?;
    let config = h.config.ok_or_else(|| load_err("missing config line"))?;
    let vocab = h.vocab.ok_or_else(|| load_err("missing vocab line"))?;
    let rng = h.rng.ok_or_else(|| load_err("missing rng line"))?;
    let progress = h.progress.ok_or_else(|| load_err("missing progress line"))?;
    let (beta1, beta2, eps) = h.optimizer.ok_or_else(|| load_err("missing optimizer line"))?;
    if vocab.len() != config.vocab_size {
        return Err(load_err(format!(
            "vocabulary has {} tokens, config declares {}",
            vocab.len(),
            config.vocab_size
        )));
    }

    let mut need = 0usize;
    for (name, dims) in &h.tensors {
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| load_err(format!("tensor {name} is too large")))?;
        need = need.checked_add(n).ok_or_else(|| load_err("tensors too large"))?;
    }
    for (name, _, len) in &h.slots {
        need = len
            .checked_mul(2)
            .and_then(|l| need.checked_add(l))
            .ok_or_else(|| load_err(format!("slot {name} is too large")))?;
    }
    let data = &body[start..];
    if need.checked_mul(8) != Some(data.len()) {
        return Err(load_err(format!("binary section holds {} bytes, header declares {need} values", data.len())));
    }
    let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };

    let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(h.tensors.len());
    for (name, dims) in h.tensors {
        let n = dims.iter().product();
        let t = Tensor::new(dims, take(n))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(load_err(format!("tensor {name} declared twice")));
        }
    }
    let mut slots = BTreeMap::new();
    for (name, step, len) in h.slots {
        let slot = AdamaxSlot {
            m: take(len),
            u: take(len),
            step,
        };
        if slots.insert(name.clone(), slot).is_some() {
            return Err(load_err(format!("optimizer slot {name} declared twice")));
        }
    }

    // Layer count bounds the shape table allocated below.
    if config.layers > tensors.len() {
        return Err(load_err(format!("config declares {} layers but too few tensors", config.layers)));
    }
    let mut problem: Option<String> = None;
    let encoder = EncoderParams::shapes(&config).map(&mut |name, shape| match tensors.remove(&name) {
        Some(t) if t.shape() == shape.as_slice() => t,
        Some(t) => {
            problem.get_or_insert(format!("tensor {name} has shape {:?}, config implies {shape:?}", t.shape()));
            t
        }
        None => {
            problem.get_or_insert(format!("missing tensor {name}"));
            Tensor::scalar(0.0)
        }
    });
    if let Some(p) = problem {
        return Err(load_err(p));
    }
    let mut heads = BTreeMap::new();
    for (spec, gamma) in h.tasks {
        let mut part = |p: &str| {
            let name = format!("head.{}.{p}", spec.id);
            tensors.remove(&name).ok_or_else(|| load_err(format!("missing tensor {name}")))
        };
        let (w, b) = (part("weight")?, part("bias")?);
        let head = Head::from_parts(&spec, config.hidden, w, b, gamma).map_err(|e| load_err(e.to_string()))?;
        if heads.insert(spec.id.clone(), TaskHead { spec, head }).is_some() {
            return Err(load_err("task declared twice"));
        }
    }
    if let Some(name) = tensors.keys().min() {
        return Err(load_err(format!("tensor {name} belongs to no parameter")));
    }
    let model = ModelState {
        config,
        vocab,
        encoder,
        heads,
    };
    let known: HashMap<String, usize> = model.named_params().into_iter().map(|(n, t)| (n, t.len())).collect();
    for (name, slot) in &slots {
        if known.get(name) != Some(&slot.m.len()) {
            return Err(load_err(format!("optimizer slot {name} matches no parameter")));
        }
    }
    Ok(Checkpoint {
        model,
        optimizer: Adamax { beta1, beta2, eps, slots },
        rng,
        progress,
        meta: h.meta,
    })
}

/// Writes atomically: a sibling temporary file is renamed into place.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ck.to_bytes()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Hex SHA-256 of a model's parameter-only checkpoint encoding.
pub fn model_digest(model: &ModelState) -> Result<String> {
    let bytes = Checkpoint::of_model(model.clone()).to_bytes()?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{suite_specs, suite_vocabulary};

    fn model() -> ModelState {
        let cfg = EncoderConfig {
            hidden: 8,
            layers: 1,
            heads: 2,
            ffn_width: 12,
            max_len: 16,
            ..Default::default()
        };
        let mut rng = RngState::new(11);
        let mut m = ModelState::new(cfg, suite_vocabulary(), &mut rng).unwrap();
        for spec in suite_specs() {
            m.add_task(spec, &mut rng).unwrap();
        }
        m
    }

    fn full() -> Checkpoint {
        let m = model();
        let mut opt = Adamax::default();
        let mut rng = RngState::new(5);
        let mut params: Vec<(String, Tensor)> =
            m.named_params().into_iter().take(3).map(|(n, t)| (n, t.clone())).collect();
        let grads: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::randn(t.shape(), 1.0, &mut rng)).collect();
        opt.step(params.iter_mut().zip(&grads).map(|((n, p), g)| (n.as_str(), p, g)), 0.1).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("role".into(), "teacher candidate 3".into());
        Checkpoint {
            model: m,
            optimizer: opt,
            rng: RngState { seed: 9, counter: 77 },
            progress: Progress {
                epochs_done: 2,
                global_step: 40,
            },
            meta,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = full();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        for ((n1, a), (n2, b)) in ck.model.named_params().iter().zip(back.model.named_params()) {
            assert_eq!(n1, &n2);
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(full().to_bytes().unwrap(), full().to_bytes().unwrap());
        assert_eq!(model_digest(&model()).unwrap(), model_digest(&model()).unwrap());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = full().to_bytes().unwrap();
        for cut in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Load(_))), "cut {cut}");
        }
    }

    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        let d = Sha256::digest(&body);
        body.extend_from_slice(&d);
        body
    }

    fn edit_header(from: &str, to: &str) -> Result<Checkpoint> {
        let bytes = full().to_bytes().unwrap();
        let body = &bytes[..bytes.len() - DIGEST_LEN];
        let end = body.windows(5).position(|w| w == b"\nend\n").unwrap() + 5;
        let header = std::str::from_utf8(&body[..end]).unwrap().replacen(from, to, 1);
        assert_ne!(header.as_bytes(), &body[..end], "edit {from} did not apply");
        let mut out = header.into_bytes();
        out.extend_from_slice(&body[end..]);
        Checkpoint::from_bytes(&reseal(out))
    }

    #[test]
    fn version_and_shape_mismatches_are_load_errors() {
        assert!(matches!(edit_header("checkpoint v1", "checkpoint v2"), Err(Error::Load(m)) if m.contains("version")));
        assert!(matches!(edit_header("encoding f64-le", "encoding f32-le"), Err(Error::Load(_))));
        // Same element count, different declared layout.
        assert!(matches!(edit_header("encoder.segment 2,8", "encoder.segment 8,2"), Err(Error::Load(m)) if m.contains("shape")));
        assert!(matches!(edit_header("hidden=8", "hidden=4"), Err(Error::Load(_))));
        assert!(matches!(edit_header("rng 9 77", "rng 9"), Err(Error::Load(_))));
    }

    #[test]
    fn save_and_load_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = full();
        save_checkpoint(&ck, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
        fs::write(&path, &fs::read(&path).unwrap()[..100]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
