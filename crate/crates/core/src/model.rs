//! The full multi-task model: shared encoder plus one head per task.

use std::collections::BTreeMap;

use crate::data::{ExampleRecord, Payload, TaskDataset};
use crate::encoder::{
    cls_rows, embed_batch, encode_batch, pack_input, tokenize, EncoderConfig, EncoderParams, Linear,
    TokenizedInput, Vocabulary,
};
use crate::error::{contract, Error, Result};
use crate::heads::{Gold, Head, TaskId, TaskKind, TaskSpec};
use crate::numerics::kernels::softmax_in_place;
use crate::numerics::{dropout_mask, RngState, Tape, Tensor, Var};

/// Examples per forward pass at inference time.
const PREDICT_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub spec: TaskSpec,
    pub head: Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: EncoderConfig,
    pub vocab: Vocabulary,
    pub encoder: EncoderParams,
    pub heads: BTreeMap<TaskId, TaskHead>,
}

/// An example turned into packed token sequences (one per ranking
/// candidate, otherwise exactly one).
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub id: String,
    pub inputs: Vec<TokenizedInput>,
    pub gold: Gold,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTask {
    pub spec: TaskSpec,
    pub examples: Vec<EncodedExample>,
}

impl EncodedTask {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Model output for one example.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    /// Class probabilities.
    Class(Vec<f64>),
    Score(f64),
    /// Raw candidate scores.
    Rank(Vec<f64>),
}

impl Prediction {
    /// Class probabilities, or the candidate distribution
    /// `softmax(gamma·scores)`. `None` for regression.
    pub fn distribution(&self, gamma: f64) -> Option<Vec<f64>> {
        match self {
            Prediction::Class(p) => Some(p.clone()),
            Prediction::Rank(s) => {
                let mut p: Vec<f64> = s.iter().map(|v| gamma * v).collect();
                softmax_in_place(&mut p);
                Some(p)
            }
            Prediction::Score(_) => None,
        }
    }
}

/// Parameters of the encoder and one head, bound to a tape.
pub(crate) struct BoundModel {
    pub encoder: EncoderParams<Var>,
    pub head: Linear<Var>,
}

fn head_name(task: &TaskId, part: &str) -> String {
    format!("head.{task}.{part}")
}

impl ModelState {
    /// A model with freshly initialized shared layers and no tasks.
    pub fn new(config: EncoderConfig, vocab: Vocabulary, rng: &mut RngState) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} does not match the vocabulary ({} tokens)",
                config.vocab_size,
                vocab.len()
            )));
        }
        let encoder = EncoderParams::init(&config, rng)?;
        Ok(Self {
            config,
            vocab,
            encoder,
            heads: BTreeMap::new(),
        })
    }

    /// Registers a task with a freshly initialized head.
    pub fn add_task(&mut self, spec: TaskSpec, rng: &mut RngState) -> Result<()> {
        if self.heads.contains_key(&spec.id) {
            return Err(Error::Config(format!("task {} already registered", spec.id)));
        }
        let head = Head::init(&spec, self.config.hidden, rng);
        self.heads.insert(spec.id.clone(), TaskHead { spec, head });
        Ok(())
    }

    /// Replaces a task's head with a fresh one, registering the task if new.
    pub fn reset_head(&mut self, spec: &TaskSpec, rng: &mut RngState) {
        let mut head = Head::init(spec, self.config.hidden, rng);
        if let (Some(old), Head::Ranking(h)) = (self.heads.get(&spec.id), &mut head) {
            h.gamma = old.head.gamma();
        }
        self.heads.insert(
            spec.id.clone(),
            TaskHead {
                spec: spec.clone(),
                head,
            },
        );
    }

    pub fn task(&self, task: &TaskId) -> Result<&TaskHead> {
        self.heads
            .get(task)
            .ok_or_else(|| Error::Config(format!("model has no head for task {task}")))
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &TaskId> {
        self.heads.keys()
    }

    /// Every parameter by name: encoder first, then heads in task order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![];
        self.encoder.map(&mut |name, t| out.push((name, t)));
        for (id, th) in &self.heads {
            out.push((head_name(id, "weight"), th.head.weight()));
            out.push((head_name(id, "bias"), th.head.bias()));
        }
        out
    }

    /// Shared parameters plus the parameters of `task`'s head.
    pub fn trainable_mut(&mut self, task: &TaskId) -> Result<Vec<(String, &mut Tensor)>> {
        let th = self
            .heads
            .get_mut(task)
            .ok_or_else(|| Error::Config(format!("model has no head for task {task}")))?;
        let mut out = self.encoder.params_mut();
        let (w, b) = th.head.params_mut();
        out.push((head_name(task, "weight"), w));
        out.push((head_name(task, "bias"), b));
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Copies the shared layers of `other` (which must have the same config).
    pub fn copy_shared_from(&mut self, other: &ModelState) -> Result<()> {
        if self.config != other.config || self.vocab != other.vocab {
            return Err(Error::Config("shared layers come from an incompatible model".into()));
        }
        self.encoder = other.encoder.clone();
        Ok(())
    }

    pub fn encode_record(&self, record: &ExampleRecord) -> Result<Vec<TokenizedInput>> {
        let tok = |s: &str| tokenize(s, &self.vocab);
        let max = self.config.max_len;
        let nonempty = |ids: Vec<u32>, what: &str| {
            if ids.is_empty() {
                Err(Error::Data(format!("example {}: empty {what}", record.id)))
            } else {
                Ok(ids)
            }
        };
        match &record.payload {
            Payload::Single { text, .. } => Ok(vec![pack_input(&nonempty(tok(text), "text")?, None, max)?]),
            Payload::Pair { text1, text2, .. } | Payload::Regression { text1, text2, .. } => {
                let a = nonempty(tok(text1), "first text")?;
                Ok(vec![pack_input(&a, Some(&tok(text2)), max)?])
            }
            Payload::Ranking { query, candidates, .. } => {
                let q = nonempty(tok(query), "query")?;
                candidates
                    .iter()
                    .map(|c| pack_input(&q, Some(&tok(c)), max))
                    .collect()
            }
        }
    }

    /// Tokenizes and packs a dataset once, for repeated use in training.
    pub fn encode_dataset(&self, data: &TaskDataset) -> Result<EncodedTask> {
        let examples = data
            .examples
            .iter()
            .map(|r| {
                Ok(EncodedExample {
                    id: r.id.clone(),
                    inputs: self.encode_record(r)?,
                    gold: r.payload.gold(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(EncodedTask {
            spec: data.spec.clone(),
            examples,
        })
    }

    /// Binds the encoder and `task`'s head to `tape`, as named parameters
    /// when `trainable`, otherwise as constants.
    pub(crate) fn bind(&self, tape: &mut Tape, task: &TaskId, trainable: bool) -> Result<BoundModel> {
        let th = self.task(task)?;
        let mut leaf = |name: String, t: &Tensor| {
            if trainable {
                tape.param(name, t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let encoder = self.encoder.map(&mut leaf);
        let head = Linear {
            weight: leaf(head_name(task, "weight"), th.head.weight()),
            bias: leaf(head_name(task, "bias"), th.head.bias()),
        };
        Ok(BoundModel { encoder, head })
    }

    /// Head outputs for a flat list of sequences: one row per sequence.
    pub(crate) fn head_outputs(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        inputs: &[&TokenizedInput],
        rng: &mut RngState,
        training: bool,
        head_dropout: f64,
    ) -> Result<Var> {
        let (x, layout) = embed_batch(tape, &bound.encoder, inputs, &self.config)?;
        let h = encode_batch(tape, &bound.encoder, x, &layout, &self.config, rng, training)?;
        let mut cls = cls_rows(tape, h, &layout)?;
        if training && head_dropout > 0.0 {
            let mask = dropout_mask(tape.value(cls).len(), head_dropout, rng)?;
            cls = tape.dropout(cls, mask)?;
        }
        tape.linear(cls, bound.head.weight, bound.head.bias)
    }

    /// Dropout-free predictions for every example of `data`.
    pub fn predict(&self, data: &EncodedTask) -> Result<Vec<Prediction>> {
        let th = self.task(&data.spec.id)?;
        if th.spec != data.spec {
            return Err(contract(format!("dataset spec does not match head for task {}", data.spec.id)));
        }
        let mut out = Vec::with_capacity(data.len());
        let mut rng = RngState::new(0);
        for chunk in data.examples.chunks(PREDICT_CHUNK) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, &data.spec.id, false)?;
            let inputs: Vec<&TokenizedInput> = chunk.iter().flat_map(|e| e.inputs.iter()).collect();
            let y = self.head_outputs(&mut tape, &bound, &inputs, &mut rng, false, 0.0)?;
            let y = tape.value(y);
            match data.spec.kind {
                TaskKind::SingleClassification | TaskKind::PairClassification => {
                    for r in 0..chunk.len() {
                        let mut p = y.row(r).to_vec();
                        softmax_in_place(&mut p);
                        out.push(Prediction::Class(p));
                    }
                }
                TaskKind::Regression => out.extend(y.data().iter().map(|&v| Prediction::Score(v))),
                TaskKind::Ranking => {
                    let mut at = 0;
                    for e in chunk {
                        let k = e.inputs.len();
                        out.push(Prediction::Rank(y.data()[at..at + k].to_vec()));
                        at += k;
                    }
                }
            }
        }
        Ok(out)
    }
}
