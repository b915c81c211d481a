//! Post-layer-norm transformer encoder with a tied masked-LM head and
//! optional task heads.
//!
//! Parameter inventory for `L` layers, hidden `H`, feed-forward `F`,
//! vocabulary `V`, positions `P` and `S` segment types:
//!
//! ```text
//! embeddings   V·H + P·H + S·H + 2H            (word, position, segment, LN)
//! per layer    4H² + 4H                         (query, key, value, output)
//!              + 2H                             (attention LN)
//!              + H·F + F + F·H + H              (feed-forward)
//!              + 2H                             (feed-forward LN)
//! MLM head     H² + H + 2H + V                  (transform, LN, output bias)
//! ```
//!
//! The MLM decoder reuses the word-embedding matrix, so it adds only the
//! `V` output biases. Task heads are counted separately by
//! [`TaskHead::param_count`].

mod checkpoint;
mod forward;
mod infer;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{Batch, BoundModel, Mode};
pub use infer::{argmax, sequence_logits, token_logits};

/// Standard deviation of the normal initializer.
pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub segment_types: usize,
}

impl EncoderConfig {
    /// 2 layers, hidden 64, 2 heads, feed-forward 256, 128 positions, 1000 tokens.
    pub fn tiny() -> Self {
        EncoderConfig {
            layers: 2,
            hidden: 64,
            heads: 2,
            ffn: 256,
            max_positions: 128,
            vocab_size: 1000,
            dropout: 0.1,
            segment_types: 2,
        }
    }

    /// 12 layers, hidden 768, 12 heads, 120,000 tokens.
    pub fn bert_like() -> Self {
        EncoderConfig {
            layers: 12,
            hidden: 768,
            heads: 12,
            ffn: 3072,
            max_positions: 512,
            vocab_size: 120_000,
            dropout: 0.1,
            segment_types: 2,
        }
    }

    /// 24 layers, hidden 1024, 16 heads, 50,000 tokens.
    pub fn roberta_large_like() -> Self {
        EncoderConfig {
            layers: 24,
            hidden: 1024,
            heads: 16,
            ffn: 4096,
            max_positions: 512,
            vocab_size: 50_000,
            dropout: 0.1,
            segment_types: 2,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "bert-like" => Ok(Self::bert_like()),
            "roberta-large-like" => Ok(Self::roberta_large_like()),
            other => Err(Error::config(format!(
                "unknown preset `{other}` (expected tiny, bert-like, roberta-large-like)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
            ("segment_types", self.segment_types),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Exact encoder parameter count (task heads excluded); see the module docs.
pub fn param_count(config: &EncoderConfig) -> Result<u64> {
    config.validate()?;
    Ok(encoder_inventory(config)
        .iter()
        .map(|p| p.numel() as u64)
        .sum())
}

/// How a parameter is initialized and whether weight decay applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormOffset,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], kind: ParamKind) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            kind,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn push_linear(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(ParamSpec::new(
        format!("{prefix}.weight"),
        &[fan_in, fan_out],
        ParamKind::Weight,
    ));
    out.push(ParamSpec::new(
        format!("{prefix}.bias"),
        &[fan_out],
        ParamKind::Bias,
    ));
}

fn push_norm(out: &mut Vec<ParamSpec>, prefix: &str, dim: usize) {
    out.push(ParamSpec::new(
        format!("{prefix}.gain"),
        &[dim],
        ParamKind::NormGain,
    ));
    out.push(ParamSpec::new(
        format!("{prefix}.offset"),
        &[dim],
        ParamKind::NormOffset,
    ));
}

/// Encoder parameters in storage order. Linear weights are `[in, out]`.
pub fn encoder_inventory(c: &EncoderConfig) -> Vec<ParamSpec> {
    let (h, f) = (c.hidden, c.ffn);
    let mut out = vec![
        ParamSpec::new("embeddings.word", &[c.vocab_size, h], ParamKind::Weight),
        ParamSpec::new(
            "embeddings.position",
            &[c.max_positions, h],
            ParamKind::Weight,
        ),
        ParamSpec::new(
            "embeddings.segment",
            &[c.segment_types, h],
            ParamKind::Weight,
        ),
    ];
    push_norm(&mut out, "embeddings.norm", h);
    for l in 0..c.layers {
        let p = format!("layer.{l}");
        for proj in ["query", "key", "value", "output"] {
            push_linear(&mut out, &format!("{p}.attention.{proj}"), h, h);
        }
        push_norm(&mut out, &format!("{p}.attention.norm"), h);
        push_linear(&mut out, &format!("{p}.ffn.inner"), h, f);
        push_linear(&mut out, &format!("{p}.ffn.outer"), f, h);
        push_norm(&mut out, &format!("{p}.ffn.norm"), h);
    }
    push_linear(&mut out, "mlm.transform", h, h);
    push_norm(&mut out, "mlm.norm", h);
    out.push(ParamSpec::new("mlm.bias", &[c.vocab_size], ParamKind::Bias));
    out
}

/// Task-specific output layer on top of the encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskHead {
    /// Tied vocabulary projection; owns no extra parameters.
    Mlm,
    /// Dense + tanh over the `[CLS]` state, then a `K`-way projection.
    Sequence { labels: Vec<String> },
    /// Per-position `K`-way projection.
    Token { labels: Vec<String> },
}

impl TaskHead {
    pub fn labels(&self) -> &[String] {
        match self {
            TaskHead::Mlm => &[],
            TaskHead::Sequence { labels } | TaskHead::Token { labels } => labels,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.labels().len()
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskHead::Mlm => Ok(()),
            TaskHead::Sequence { labels } | TaskHead::Token { labels } => {
                if labels.len() < 2 {
                    return Err(Error::config(format!(
                        "classification head needs at least 2 labels, got {}",
                        labels.len()
                    )));
                }
                let mut seen = std::collections::HashSet::new();
                if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
                    return Err(Error::config(format!("duplicate head label `{dup}`")));
                }
                Ok(())
            }
        }
    }

    pub fn inventory(&self, hidden: usize) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        match self {
            TaskHead::Mlm => {}
            TaskHead::Sequence { labels } => {
                push_linear(&mut out, "head.dense", hidden, hidden);
                push_linear(&mut out, "head.out", hidden, labels.len());
            }
            TaskHead::Token { labels } => push_linear(&mut out, "head.out", hidden, labels.len()),
        }
        out
    }

    pub fn param_count(&self, hidden: usize) -> u64 {
        self.inventory(hidden)
            .iter()
            .map(|p| p.numel() as u64)
            .sum()
    }
}

fn init_tensor<T: Scalar>(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, INIT_STD).expect("finite std");
    let n = spec.numel();
    let data: Vec<T> = match spec.kind {
        ParamKind::Weight => (0..n).map(|_| T::from_f64(normal.sample(rng))).collect(),
        ParamKind::Bias | ParamKind::NormOffset => vec![T::zero(); n],
        ParamKind::NormGain => vec![T::one(); n],
    };
    Tensor::new(spec.shape.clone(), data).expect("inventory shapes are positive")
}

/// Encoder (and optional head) parameters aligned with their inventory.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T: Scalar = f32> {
    config: EncoderConfig,
    head: Option<TaskHead>,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Weights<T> {
    /// Normal(0, 0.02²) weights, zero biases, unit gains; deterministic per seed.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = encoder_inventory(config);
        let tensors = specs.iter().map(|s| init_tensor(s, &mut rng)).collect();
        Ok(Weights {
            config: config.clone(),
            head: None,
            specs,
            tensors,
        })
    }

    /// Assemble from tensors in inventory order, checking every shape.
    pub fn from_tensors(
        config: EncoderConfig,
        head: Option<TaskHead>,
        tensors: Vec<Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let mut specs = encoder_inventory(&config);
        if let Some(h) = &head {
            h.validate()?;
            specs.extend(h.inventory(config.hidden));
        }
        if specs.len() != tensors.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(Error::shape(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(Weights {
            config,
            head,
            specs,
            tensors,
        })
    }

    /// Replace any task head with a freshly initialized one.
    pub fn with_head(mut self, head: TaskHead, seed: u64) -> Result<Self> {
        head.validate()?;
        let n_enc = encoder_inventory(&self.config).len();
        self.specs.truncate(n_enc);
        self.tensors.truncate(n_enc);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in head.inventory(self.config.hidden) {
            self.tensors.push(init_tensor(&spec, &mut rng));
            self.specs.push(spec);
        }
        self.head = match head {
            TaskHead::Mlm => None,
            h => Some(h),
        };
        Ok(self)
    }

    /// Drop the task head, keeping the encoder and MLM head.
    pub fn without_head(mut self) -> Self {
        let n_enc = encoder_inventory(&self.config).len();
        self.specs.truncate(n_enc);
        self.tensors.truncate(n_enc);
        self.head = None;
        self
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn head(&self) -> Option<&TaskHead> {
        self.head.as_ref()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn name_index(&self) -> HashMap<&str, usize> {
        self.specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.as_str(), i))
            .collect()
    }

    pub fn param_count(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            config: self.config.clone(),
            head: self.head.clone(),
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
