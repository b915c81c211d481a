use crate::error::{Error, Result};
use crate::tensor::Tape;
use crate::tokenizer::Encoding;

use super::{Batch, BoundModel, Mode, TaskHead, Weights};

const EVAL_BATCH: usize = 32;

/// Sequence-head logits, one `K`-vector per encoding (dropout off).
pub fn sequence_logits(weights: &Weights<f32>, encodings: &[Encoding]) -> Result<Vec<Vec<f32>>> {
    if !matches!(weights.head(), Some(TaskHead::Sequence { .. })) {
        return Err(Error::contract("model has no sequence-classification head"));
    }
    let mut out = Vec::with_capacity(encodings.len());
    for chunk in encodings.chunks(EVAL_BATCH) {
        let batch = Batch::from_encodings(chunk)?;
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, weights, false);
        let hidden = model.encode(&mut tape, &batch, &mut Mode::Eval)?;
        let logits = model.head_logits(&mut tape, hidden, &batch, &mut Mode::Eval)?;
        let value = tape.value(logits);
        let k = value.shape()[1];
        out.extend(value.data().chunks(k).map(<[f32]>::to_vec));
    }
    Ok(out)
}

/// Token-head logits: per encoding, one `K`-vector for each valid position.
pub fn token_logits(weights: &Weights<f32>, encodings: &[Encoding]) -> Result<Vec<Vec<Vec<f32>>>> {
    if !matches!(weights.head(), Some(TaskHead::Token { .. })) {
        return Err(Error::contract("model has no token-classification head"));
    }
    let mut out = Vec::with_capacity(encodings.len());
    for chunk in encodings.chunks(EVAL_BATCH) {
        let batch = Batch::from_encodings(chunk)?;
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, weights, false);
        let hidden = model.encode(&mut tape, &batch, &mut Mode::Eval)?;
        let logits = model.head_logits(&mut tape, hidden, &batch, &mut Mode::Eval)?;
        let value = tape.value(logits);
        let k = value.shape()[1];
        for (b, &valid) in batch.valid_lens.iter().enumerate() {
            let start = b * batch.seq_len;
            out.push(
                (start..start + valid)
                    .map(|r| value.data()[r * k..(r + 1) * k].to_vec())
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Index of the largest value; the first wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
