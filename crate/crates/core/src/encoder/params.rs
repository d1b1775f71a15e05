use crate::error::{contract, Result};
use crate::numerics::{RngState, Tensor};

/// Hard cap on sequence length.
pub const MAX_SEQ_LEN: usize = 512;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            layers: 2,
            heads: 4,
            ffn_width: 64,
            max_len: 64,
            vocab_size: 64,
            dropout_rate: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(contract(format!(
                "hidden width {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.ffn_width == 0 || self.vocab_size < 5 {
            return Err(contract("ffn width and vocabulary size must be positive"));
        }
        if !(2..=MAX_SEQ_LEN).contains(&self.max_len) {
            return Err(contract(format!("max_len {} outside 2..={MAX_SEQ_LEN}", self.max_len)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(contract(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Affine map `x Wᵀ + b` with `W` stored `out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

/// Layer-norm gain and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T = Tensor> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = Tensor> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub attn_norm: Norm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
    pub ffn_norm: Norm<T>,
}

/// All shared-layer parameters. `T` is `Tensor` for storage and `Var` once
/// bound to a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    pub word: T,
    pub segment: T,
    pub position: T,
    /// Normalizes the summed embeddings on entry to a non-empty stack.
    pub embed_norm: Norm<T>,
    pub layers: Vec<LayerParams<T>>,
}

impl Linear {
    pub fn init(out: usize, inp: usize, rng: &mut RngState) -> Self {
        Self {
            weight: Tensor::randn(&[out, inp], 1.0 / (inp as f64).sqrt(), rng),
            bias: Tensor::zeros(&[out]),
        }
    }
}

impl Norm {
    pub fn init(width: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
        }
    }
}

impl<T> Linear<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T) -> U) -> Linear<U> {
        Linear {
            weight: f(format!("{prefix}.weight"), &self.weight),
            bias: f(format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

impl<T> Norm<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T) -> U) -> Norm<U> {
        Norm {
            gamma: f(format!("{prefix}.gamma"), &self.gamma),
            beta: f(format!("{prefix}.beta"), &self.beta),
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }
}

impl<T> LayerParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T) -> U) -> LayerParams<U> {
        LayerParams {
            query: self.query.map(&format!("{prefix}.query"), f),
            key: self.key.map(&format!("{prefix}.key"), f),
            value: self.value.map(&format!("{prefix}.value"), f),
            output: self.output.map(&format!("{prefix}.output"), f),
            attn_norm: self.attn_norm.map(&format!("{prefix}.attn_norm"), f),
            ffn_in: self.ffn_in.map(&format!("{prefix}.ffn_in"), f),
            ffn_out: self.ffn_out.map(&format!("{prefix}.ffn_out"), f),
            ffn_norm: self.ffn_norm.map(&format!("{prefix}.ffn_norm"), f),
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.query.collect_mut(&format!("{prefix}.query"), out);
        self.key.collect_mut(&format!("{prefix}.key"), out);
        self.value.collect_mut(&format!("{prefix}.value"), out);
        self.output.collect_mut(&format!("{prefix}.output"), out);
        self.attn_norm.collect_mut(&format!("{prefix}.attn_norm"), out);
        self.ffn_in.collect_mut(&format!("{prefix}.ffn_in"), out);
        self.ffn_out.collect_mut(&format!("{prefix}.ffn_out"), out);
        self.ffn_norm.collect_mut(&format!("{prefix}.ffn_norm"), out);
    }
}

impl EncoderParams {
    /// Fresh parameters: `N(0, 0.02²)` embedding tables, `N(0, 1/fan_in)`
    /// dense weights, zero biases, unit layer-norm gain.
    pub fn init(config: &EncoderConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let word = Tensor::randn(&[config.vocab_size, d], INIT_STD, rng);
        let segment = Tensor::randn(&[2, d], INIT_STD, rng);
        let position = Tensor::randn(&[config.max_len, d], INIT_STD, rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                query: Linear::init(d, d, rng),
                key: Linear::init(d, d, rng),
                value: Linear::init(d, d, rng),
                output: Linear::init(d, d, rng),
                attn_norm: Norm::init(d),
                ffn_in: Linear::init(config.ffn_width, d, rng),
                ffn_out: Linear::init(d, config.ffn_width, rng),
                ffn_norm: Norm::init(d),
            })
            .collect();
        Ok(Self {
            word,
            segment,
            position,
            embed_norm: Norm::init(d),
            layers,
        })
    }
}

impl EncoderParams<Vec<usize>> {
    /// Parameter shapes implied by `config`, without allocating values.
    pub fn shapes(config: &EncoderConfig) -> Self {
        let d = config.hidden;
        let lin = |out: usize, inp: usize| Linear {
            weight: vec![out, inp],
            bias: vec![out],
        };
        let norm = || Norm {
            gamma: vec![d],
            beta: vec![d],
        };
        EncoderParams {
            word: vec![config.vocab_size, d],
            segment: vec![2, d],
            position: vec![config.max_len, d],
            embed_norm: norm(),
            layers: (0..config.layers)
                .map(|_| LayerParams {
                    query: lin(d, d),
                    key: lin(d, d),
                    value: lin(d, d),
                    output: lin(d, d),
                    attn_norm: norm(),
                    ffn_in: lin(config.ffn_width, d),
                    ffn_out: lin(d, config.ffn_width),
                    ffn_norm: norm(),
                })
                .collect(),
        }
    }
}

impl<T> EncoderParams<T> {
    /// Visits every parameter under its canonical name (`encoder.…`).
    pub fn map<'a, U>(&'a self, f: &mut dyn FnMut(String, &'a T) -> U) -> EncoderParams<U> {
        EncoderParams {
            word: f("encoder.word".into(), &self.word),
            segment: f("encoder.segment".into(), &self.segment),
            position: f("encoder.position".into(), &self.position),
            embed_norm: self.embed_norm.map("encoder.embed_norm", f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("encoder.layer{i}"), f))
                .collect(),
        }
    }

    /// Mutable access to every parameter, in the same order as [`Self::map`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![
            ("encoder.word".to_string(), &mut self.word),
            ("encoder.segment".to_string(), &mut self.segment),
            ("encoder.position".to_string(), &mut self.position),
        ];
        self.embed_norm.collect_mut("encoder.embed_norm", &mut out);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.collect_mut(&format!("encoder.layer{i}"), &mut out);
        }
        out
    }
}
