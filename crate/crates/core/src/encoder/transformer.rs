use super::input::TokenizedInput;
use super::params::{EncoderConfig, EncoderParams, Linear};
use super::vocab::PAD_ID;
use crate::error::{contract, Result};
use crate::numerics::{dropout_mask, RngState, Tape, Tensor, Var};

/// Row layout of a padded batch: sequence `b` occupies rows
/// `b·seq_len .. b·seq_len + lengths[b]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchLayout {
    pub seq_len: usize,
    pub lengths: Vec<usize>,
}

impl BatchLayout {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }
}

/// Contextual embeddings of one sequence, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextualEmbeddings {
    rows: Tensor,
}

impl ContextualEmbeddings {
    pub fn new(rows: Tensor) -> Result<Self> {
        rows.dims2()?;
        Ok(Self { rows })
    }

    /// Number of tokens.
    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hidden(&self) -> usize {
        self.rows.shape()[1]
    }

    /// The embedding of token `j`.
    pub fn column(&self, j: usize) -> &[f64] {
        self.rows.row(j)
    }

    /// Token-major view (`m×d`).
    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    /// Feature-major copy (`d×m`).
    pub fn matrix(&self) -> Tensor {
        self.rows.transpose().expect("rank-2")
    }
}

/// Sums word, segment and position embeddings for a padded batch.
pub fn embed_batch(
    tape: &mut Tape,
    params: &EncoderParams<Var>,
    inputs: &[&TokenizedInput],
    config: &EncoderConfig,
) -> Result<(Var, BatchLayout)> {
    if inputs.is_empty() {
        return Err(contract("empty batch"));
    }
    let seq_len = inputs.iter().map(|t| t.len()).max().unwrap_or(0);
    if seq_len > config.max_len {
        return Err(contract(format!("sequence length {seq_len} exceeds max_len {}", config.max_len)));
    }
    let rows = inputs.len() * seq_len;
    let (mut ids, mut segs, mut pos) = (
        Vec::with_capacity(rows),
        Vec::with_capacity(rows),
        Vec::with_capacity(rows),
    );
    let mut lengths = Vec::with_capacity(inputs.len());
    for t in inputs {
        if t.is_empty() || t.segment_ids.len() != t.len() {
            return Err(contract("malformed tokenized input"));
        }
        for j in 0..seq_len {
            let (id, seg) = match (t.ids.get(j), t.segment_ids.get(j)) {
                (Some(&id), Some(&seg)) => (id as usize, seg as usize),
                _ => (PAD_ID as usize, 0),
            };
            if id >= config.vocab_size {
                return Err(contract(format!("token id {id} outside vocabulary of {}", config.vocab_size)));
            }
            if seg > 1 {
                return Err(contract(format!("segment id {seg} is not 0 or 1")));
            }
            ids.push(id);
            segs.push(seg);
            pos.push(j);
        }
        lengths.push(t.len());
    }
    let w = tape.gather(params.word, ids)?;
    let s = tape.gather(params.segment, segs)?;
    let p = tape.gather(params.position, pos)?;
    let ws = tape.add(w, s)?;
    Ok((tape.add(ws, p)?, BatchLayout { seq_len, lengths }))
}

fn maybe_dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut RngState, training: bool) -> Result<Var> {
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.value(x).len(), rate, rng)?;
    tape.dropout(x, mask)
}

fn affine(tape: &mut Tape, x: Var, l: &Linear<Var>) -> Result<Var> {
    tape.linear(x, l.weight, l.bias)
}

/// Runs the transformer stack over embedded rows.
pub fn encode_batch(
    tape: &mut Tape,
    params: &EncoderParams<Var>,
    x: Var,
    layout: &BatchLayout,
    config: &EncoderConfig,
    rng: &mut RngState,
    training: bool,
) -> Result<Var> {
    let rate = config.dropout_rate;
    if params.layers.is_empty() {
        return Ok(x);
    }
    let x = tape.layer_norm(x, params.embed_norm.gamma, params.embed_norm.beta)?;
    let mut h = maybe_dropout(tape, x, rate, rng, training)?;
    for layer in &params.layers {
        let q = affine(tape, h, &layer.query)?;
        let k = affine(tape, h, &layer.key)?;
        let v = affine(tape, h, &layer.value)?;
        let a = tape.attention(q, k, v, config.heads, layout.seq_len, &layout.lengths)?;
        let o = affine(tape, a, &layer.output)?;
        let o = maybe_dropout(tape, o, rate, rng, training)?;
        let r = tape.add(h, o)?;
        h = tape.layer_norm(r, layer.attn_norm.gamma, layer.attn_norm.beta)?;

        let f = affine(tape, h, &layer.ffn_in)?;
        let f = tape.gelu(f);
        let f = affine(tape, f, &layer.ffn_out)?;
        let f = maybe_dropout(tape, f, rate, rng, training)?;
        let r = tape.add(h, f)?;
        h = tape.layer_norm(r, layer.ffn_norm.gamma, layer.ffn_norm.beta)?;
    }
    Ok(h)
}

/// Gathers the `[CLS]` row of every sequence in the batch.
pub fn cls_rows(tape: &mut Tape, h: Var, layout: &BatchLayout) -> Result<Var> {
    let rows = (0..layout.batch_size()).map(|b| b * layout.seq_len).collect();
    tape.gather(h, rows)
}

fn bind_constants(tape: &mut Tape, params: &EncoderParams) -> EncoderParams<Var> {
    params.map(&mut |_, t| tape.constant(t.clone()))
}

/// Embeds a single sequence (`m×d`, one row per token).
pub fn embed(input: &TokenizedInput, params: &EncoderParams, config: &EncoderConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = bind_constants(&mut tape, params);
    let (x, _) = embed_batch(&mut tape, &p, &[input], config)?;
    Ok(tape.value(x).clone())
}

/// Encodes one embedded sequence (`m×d`).
pub fn encode(
    emb: &Tensor,
    params: &EncoderParams,
    config: &EncoderConfig,
    rng: &mut RngState,
    training: bool,
) -> Result<ContextualEmbeddings> {
    let (m, d) = emb.dims2()?;
    if d != config.hidden {
        return Err(contract(format!("embedding width {d} does not match hidden {}", config.hidden)));
    }
    let mut tape = Tape::new();
    let p = bind_constants(&mut tape, params);
    let x = tape.constant(emb.clone().reshape(vec![m, d])?);
    let layout = BatchLayout {
        seq_len: m,
        lengths: vec![m],
    };
    let h = encode_batch(&mut tape, &p, x, &layout, config, rng, training)?;
    ContextualEmbeddings::new(tape.value(h).clone())
}

/// The contextual embedding of the `[CLS]` token.
pub fn cls_vector(c: &ContextualEmbeddings) -> Vec<f64> {
    c.column(0).to_vec()
}
