use std::collections::HashMap;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};
use crate::tokenizer::Encoding;

use super::{EncoderConfig, TaskHead, Weights, LAYER_NORM_EPS};

/// Right-padded token ids for `size()` sequences of `seq_len` positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub valid_lens: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    /// Stack encodings, cutting or padding each to the longest valid length.
    pub fn from_encodings<'a, I>(encodings: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Encoding>,
    {
        let encodings: Vec<&Encoding> = encodings.into_iter().collect();
        if encodings.is_empty() {
            return Err(Error::shape("empty batch"));
        }
        if let Some(e) = encodings
            .iter()
            .find(|e| e.valid_len == 0 || e.valid_len > e.ids.len())
        {
            return Err(Error::shape(format!(
                "encoding with valid length {} over {} ids",
                e.valid_len,
                e.ids.len()
            )));
        }
        let seq_len = encodings.iter().map(|e| e.valid_len).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(seq_len * encodings.len());
        let mut segments = Vec::with_capacity(ids.capacity());
        for e in &encodings {
            for p in 0..seq_len {
                ids.push(e.ids.get(p).copied().unwrap_or(crate::tokenizer::PAD_ID));
                segments.push(e.segments.get(p).copied().unwrap_or(0));
            }
        }
        Ok(Batch {
            ids,
            segments,
            valid_lens: encodings.iter().map(|e| e.valid_len).collect(),
            seq_len,
        })
    }

    pub fn size(&self) -> usize {
        self.valid_lens.len()
    }

    /// Flat row index of `[CLS]` (position 0) in each sequence.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.size()).map(|b| b * self.seq_len).collect()
    }
}

/// Dropout on (with the given generator) or off.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

/// Model parameters recorded on a tape.
pub struct BoundModel {
    config: EncoderConfig,
    head: Option<TaskHead>,
    vars: Vec<Var>,
    by_name: HashMap<String, Var>,
}

impl BoundModel {
    /// Record every tensor of `weights`; as trainable parameters when
    /// `trainable`, otherwise as constants.
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, weights: &Weights<T>, trainable: bool) -> Self {
        let mut vars = Vec::with_capacity(weights.tensors().len());
        let mut by_name = HashMap::with_capacity(vars.capacity());
        for (spec, t) in weights.specs().iter().zip(weights.tensors()) {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.push(v);
            by_name.insert(spec.name.clone(), v);
        }
        BoundModel {
            config: weights.config().clone(),
            head: weights.head().cloned(),
            vars,
            by_name,
        }
    }

    /// Vars in inventory order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Var {
        self.by_name[name]
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn dropout<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        match mode {
            Mode::Train(rng) if self.config.dropout > 0.0 => {
                tape.dropout(x, self.config.dropout, &mut **rng)
            }
            _ => Ok(x),
        }
    }

    fn linear<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let y = tape.matmul(x, self.var(&format!("{prefix}.weight")))?;
        tape.add(y, self.var(&format!("{prefix}.bias")))
    }

    fn norm<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        tape.layer_norm(
            x,
            self.var(&format!("{prefix}.gain")),
            self.var(&format!("{prefix}.offset")),
            LAYER_NORM_EPS,
        )
    }

    /// `[B·S, H]` → `[B, heads, S, head_dim]`.
    fn split_heads<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        b: usize,
        s: usize,
    ) -> Result<Var> {
        let (nh, dh) = (self.config.heads, self.config.head_dim());
        let x = tape.reshape(x, &[b, s, nh, dh])?;
        tape.permute(x, &[0, 2, 1, 3])
    }

    /// Final hidden states, `[B·S, H]` in row-major batch order.
    ///
    /// Padding positions never receive attention from any position, so
    /// their ids cannot influence outputs at valid positions.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let c = &self.config;
        let (b, s, h) = (batch.size(), batch.seq_len, c.hidden);
        if s > c.max_positions {
            return Err(Error::shape(format!(
                "sequence length {s} exceeds {} positions",
                c.max_positions
            )));
        }
        if batch.ids.len() != b * s || batch.segments.len() != b * s {
            return Err(Error::shape(format!(
                "batch holds {} ids for {b}×{s} positions",
                batch.ids.len()
            )));
        }
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..b * s).map(|i| i % s).collect();
        let segments: Vec<usize> = batch.segments.iter().map(|&g| g as usize).collect();

        let words = tape.embedding(self.var("embeddings.word"), &ids)?;
        let pos = tape.embedding(self.var("embeddings.position"), &positions)?;
        let seg = tape.embedding(self.var("embeddings.segment"), &segments)?;
        let x = tape.add(words, pos)?;
        let x = tape.add(x, seg)?;
        let x = self.norm(tape, x, "embeddings.norm")?;
        let mut x = self.dropout(tape, x, mode)?;

        let scale = 1.0 / (c.head_dim() as f64).sqrt();
        for l in 0..c.layers {
            let p = format!("layer.{l}");
            let q = self.linear(tape, x, &format!("{p}.attention.query"))?;
            let k = self.linear(tape, x, &format!("{p}.attention.key"))?;
            let v = self.linear(tape, x, &format!("{p}.attention.value"))?;
            let q = self.split_heads(tape, q, b, s)?;
            let k = self.split_heads(tape, k, b, s)?;
            let v = self.split_heads(tape, v, b, s)?;
            let scores = tape.matmul_t(q, k)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.masked_softmax(scores, &batch.valid_lens)?;
            let probs = self.dropout(tape, probs, mode)?;
            let ctx = tape.matmul(probs, v)?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[b * s, h])?;
            let attn = self.linear(tape, ctx, &format!("{p}.attention.output"))?;
            let attn = self.dropout(tape, attn, mode)?;
            let attn = tape.add(attn, x)?;
            let x1 = self.norm(tape, attn, &format!("{p}.attention.norm"))?;

            let inner = self.linear(tape, x1, &format!("{p}.ffn.inner"))?;
            let inner = tape.gelu(inner);
            let outer = self.linear(tape, inner, &format!("{p}.ffn.outer"))?;
            let outer = self.dropout(tape, outer, mode)?;
            let outer = tape.add(outer, x1)?;
            x = self.norm(tape, outer, &format!("{p}.ffn.norm"))?;
        }
        Ok(x)
    }

    /// Vocabulary logits `[rows.len(), V]` for the selected flat rows of
    /// `hidden` (all rows when `rows` is `None`).
    pub fn mlm_logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        hidden: Var,
        rows: Option<&[usize]>,
    ) -> Result<Var> {
        let x = match rows {
            Some(r) => tape.embedding(hidden, r)?,
            None => hidden,
        };
        let x = self.linear(tape, x, "mlm.transform")?;
        let x = tape.gelu(x);
        let x = self.norm(tape, x, "mlm.norm")?;
        let logits = tape.matmul_t(x, self.var("embeddings.word"))?;
        tape.add(logits, self.var("mlm.bias"))
    }

    /// Task-head logits: `[B, K]` for a sequence head, `[B·S, K]` for a
    /// token head.
    pub fn head_logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        hidden: Var,
        batch: &Batch,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let hidden_dim = tape.shape(hidden).last().copied().unwrap_or(0);
        if hidden_dim != self.config.hidden {
            return Err(Error::shape(format!(
                "head expects hidden size {}, got {hidden_dim}",
                self.config.hidden
            )));
        }
        match &self.head {
            None | Some(TaskHead::Mlm) => Err(Error::contract("model has no classification head")),
            Some(TaskHead::Sequence { .. }) => {
                let cls = tape.embedding(hidden, &batch.cls_rows())?;
                let cls = self.dropout(tape, cls, mode)?;
                let pooled = self.linear(tape, cls, "head.dense")?;
                let pooled = tape.tanh(pooled);
                let pooled = self.dropout(tape, pooled, mode)?;
                self.linear(tape, pooled, "head.out")
            }
            Some(TaskHead::Token { .. }) => {
                let x = self.dropout(tape, hidden, mode)?;
                self.linear(tape, x, "head.out")
            }
        }
    }
}
