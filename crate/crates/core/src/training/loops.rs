use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::corpus::PretrainBlock;
use crate::error::{Error, Result};
use crate::model::{argmax, Batch, BoundModel, Checkpoint, Mode, TaskHead, Weights};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{
    mask_for_mlm, Encoding, MaskAction, MaskingConfig, MaskingOutcome, SubwordVocab, Tokenizer,
    IGNORE_LABEL, MASK_ID,
};

use super::{clip_grad_norm, lr_at, AdamW, EpochRecord, ScheduleSpec, StepRecord, TrainRunConfig};

const EVAL_BATCH: usize = 32;

// Independent generator streams derived from the run seed.
const STREAM_ORDER: u64 = 0;
const STREAM_MASK: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn in_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn run_id(kind: &str, run: &TrainRunConfig, base: &str, data: impl Serialize) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update(serde_json::to_vec(run).expect("run config serializes"));
    h.update(base.as_bytes());
    h.update(serde_json::to_vec(&data).expect("data serializes"));
    format!("run-{}", hex::encode(&h.finalize()[..8]))
}

fn block_encoding(ids: &[u32]) -> Encoding {
    Encoding {
        ids: ids.to_vec(),
        valid_len: ids.len(),
        segments: vec![0; ids.len()],
        word_starts: vec![false; ids.len()],
        word_count: 0,
    }
}

/// Mask every encoding; if nothing was selected anywhere, mask one uniformly
/// chosen regular position so the loss is defined.
fn mask_all<R: Rng>(
    encodings: &[&Encoding],
    rng: &mut R,
    masking: &MaskingConfig,
    vocab_size: usize,
) -> Result<Vec<MaskingOutcome>> {
    let mut out = encodings
        .iter()
        .map(|e| mask_for_mlm(e, rng, masking, vocab_size))
        .collect::<Result<Vec<_>>>()?;
    if out.iter().all(|o| o.selected() == 0) {
        let candidates: Vec<(usize, usize)> = encodings
            .iter()
            .enumerate()
            .flat_map(|(b, e)| {
                (0..e.valid_len)
                    .filter(move |&p| !SubwordVocab::is_special(e.ids[p]))
                    .map(move |p| (b, p))
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::data("no maskable tokens in batch"));
        }
        let (b, p) = candidates[rng.random_range(0..candidates.len())];
        out[b].labels[p] = encodings[b].ids[p] as i64;
        out[b].ids[p] = MASK_ID;
        out[b].actions[p] = MaskAction::Mask;
    }
    Ok(out)
}

/// Corrupted batch plus flat row indices and targets of masked positions.
fn masked_batch(
    encodings: &[&Encoding],
    outcomes: &[MaskingOutcome],
) -> Result<(Batch, Vec<usize>, Vec<i64>)> {
    let corrupted: Vec<Encoding> = encodings
        .iter()
        .zip(outcomes)
        .map(|(e, o)| Encoding {
            ids: o.ids.clone(),
            ..(*e).clone()
        })
        .collect();
    let batch = Batch::from_encodings(&corrupted)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, o) in outcomes.iter().enumerate() {
        for (p, &l) in o.labels.iter().enumerate().take(batch.seq_len) {
            if l != IGNORE_LABEL {
                rows.push(b * batch.seq_len + p);
                targets.push(l);
            }
        }
    }
    Ok((batch, rows, targets))
}

struct Trainer {
    weights: Weights<f32>,
    optimizer: AdamW<f32>,
    decay: Vec<bool>,
    schedule: Option<ScheduleSpec>,
    grad_clip: Option<f64>,
    steps: u64,
}

impl Trainer {
    fn new(weights: Weights<f32>, run: &TrainRunConfig, total: u64) -> Result<Self> {
        let schedule = if total > 0 {
            Some(run.schedule_for(total)?)
        } else {
            None
        };
        Ok(Trainer {
            optimizer: AdamW::new(weights.tensors(), run.weight_decay),
            decay: weights.specs().iter().map(|s| s.kind.decays()).collect(),
            weights,
            schedule,
            grad_clip: run.grad_clip,
            steps: 0,
        })
    }

    /// Build the loss with `build`, back-propagate and update. Returns the
    /// learning rate used, the loss, and the value of the auxiliary var.
    fn step(
        &mut self,
        build: impl FnOnce(&mut Tape<f32>, &BoundModel) -> Result<(Var, Var)>,
    ) -> Result<(f64, f64, Tensor<f32>)> {
        let schedule = self
            .schedule
            .as_ref()
            .ok_or_else(|| Error::contract("step beyond schedule"))?;
        let lr = lr_at(schedule, self.steps)?;
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, &self.weights, true);
        let (loss, aux) = build(&mut tape, &model)?;
        let loss_value = tape.value(loss).item()? as f64;
        if !loss_value.is_finite() {
            return Err(Error::Training {
                step: self.steps + 1,
                message: format!("non-finite loss {loss_value}"),
            });
        }
        let grads = tape.backward(loss)?;
        let mut grads: Vec<Tensor<f32>> = model.vars().iter().map(|&v| grads.wrt(v)).collect();
        if let Some(c) = self.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        self.optimizer
            .step(self.weights.tensors_mut(), &grads, &self.decay, lr)?;
        self.steps += 1;
        Ok((lr, loss_value, tape.value(aux).clone()))
    }
}

/// Result of a (continued) pre-training run.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
    pub run_id: String,
}

fn mlm_loop(
    blocks: &[PretrainBlock],
    weights: Weights<f32>,
    run: &TrainRunConfig,
    masking: &MaskingConfig,
) -> Result<(Weights<f32>, Vec<StepRecord>)> {
    run.validate()?;
    masking.validate()?;
    if blocks.is_empty() {
        return Err(Error::data("empty pre-training corpus"));
    }
    let max_pos = weights.config().max_positions;
    if let Some(b) = blocks
        .iter()
        .find(|b| b.ids.len() > max_pos || b.ids.is_empty())
    {
        return Err(Error::shape(format!(
            "block of {} tokens does not fit {max_pos} positions",
            b.ids.len()
        )));
    }
    let vocab_size = weights.config().vocab_size;
    let total = run.total_steps(blocks.len());
    let mut trainer = Trainer::new(weights, run, total)?;
    let encodings: Vec<Encoding> = blocks.iter().map(|b| block_encoding(&b.ids)).collect();
    let mut order_rng = stream(run.seed, STREAM_ORDER);
    let mut mask_rng = stream(run.seed, STREAM_MASK);
    let mut drop_rng = stream(run.seed, STREAM_DROPOUT);
    let mut history = Vec::with_capacity(total as usize);
    let mut order: Vec<usize> = (0..blocks.len()).collect();

    'epochs: for epoch in 1..=run.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(run.batch_size) {
            if trainer.steps >= total {
                break 'epochs;
            }
            let batch_encodings: Vec<&Encoding> = chunk.iter().map(|&i| &encodings[i]).collect();
            let outcomes = mask_all(&batch_encodings, &mut mask_rng, masking, vocab_size)?;
            let (batch, rows, targets) = masked_batch(&batch_encodings, &outcomes)?;
            let (lr, loss, _) = trainer.step(|tape, model| {
                let mut mode = Mode::Train(&mut drop_rng);
                let hidden = model.encode(tape, &batch, &mut mode)?;
                let logits = model.mlm_logits(tape, hidden, Some(&rows))?;
                let loss = tape.cross_entropy(logits, &targets, IGNORE_LABEL)?;
                Ok((loss, loss))
            })?;
            log::debug!(
                "step {} epoch {epoch} lr {lr:.3e} loss {loss:.4}",
                trainer.steps
            );
            history.push(StepRecord {
                step: trainer.steps,
                epoch,
                lr,
                loss,
            });
        }
    }
    Ok((trainer.weights, history))
}

/// Masked-LM training over pre-framed blocks. Any task head on the input
/// checkpoint is dropped.
pub fn pretrain_mlm(
    blocks: &[PretrainBlock],
    tokenizer: &Tokenizer,
    checkpoint: Checkpoint,
    run: &TrainRunConfig,
    masking: &MaskingConfig,
) -> Result<PretrainOutcome> {
    checkpoint.check_vocab(tokenizer.vocab().len())?;
    let lens: Vec<usize> = blocks.iter().map(|b| b.ids.len()).collect();
    let id = run_id(
        "pretrain",
        run,
        "",
        (&lens, blocks.iter().map(|b| &b.ids).collect::<Vec<_>>()),
    );
    let weights = checkpoint.weights.without_head();
    let (weights, history) = in_pool(run.threads, || mlm_loop(blocks, weights, run, masking))??;
    let mut provenance = checkpoint.provenance;
    provenance.push(id.clone());
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            weights,
            step: checkpoint.step + history.len() as u64,
            seed: run.seed,
            provenance,
        },
        history,
        run_id: id,
    })
}

/// Further masked-LM training from `base` with a fresh optimizer. The
/// output's provenance appends the base id and this run's id.
pub fn continue_pretraining(
    base: &Checkpoint,
    blocks: &[PretrainBlock],
    tokenizer: &Tokenizer,
    run: &TrainRunConfig,
    masking: &MaskingConfig,
) -> Result<PretrainOutcome> {
    base.check_vocab(tokenizer.vocab().len())?;
    let max_pos = base.config().max_positions;
    if let Some(b) = blocks.iter().find(|b| b.ids.len() > max_pos) {
        return Err(Error::Compatibility(format!(
            "block of {} tokens exceeds the base model's {max_pos} positions",
            b.ids.len()
        )));
    }
    let base_id = base.id();
    let id = run_id(
        "continue",
        run,
        &base_id,
        blocks.iter().map(|b| &b.ids).collect::<Vec<_>>(),
    );
    let weights = base.weights.clone().without_head();
    let (weights, history) = in_pool(run.threads, || mlm_loop(blocks, weights, run, masking))??;
    let mut provenance = base.provenance.clone();
    provenance.push(base_id);
    provenance.push(id.clone());
    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            weights,
            step: base.step + history.len() as u64,
            seed: run.seed,
            provenance,
        },
        history,
        run_id: id,
    })
}

/// Supervision for one fine-tuning input.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Target {
    /// Class index for a sequence head.
    Class(usize),
    /// Per-position tag indices for a token head; [`IGNORE_LABEL`] marks
    /// positions without a target.
    Tags(Vec<i64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub encoding: Encoding,
    pub target: Target,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Weights after the epoch with the highest dev metric (the last epoch
    /// when no dev evaluator is given).
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub last: Checkpoint,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub run_id: String,
}

fn check_targets(examples: &[LabeledExample], head: &TaskHead) -> Result<()> {
    let k = head.num_classes();
    for (i, ex) in examples.iter().enumerate() {
        match (head, &ex.target) {
            (TaskHead::Sequence { .. }, Target::Class(c)) => {
                if *c >= k {
                    return Err(Error::data(format!(
                        "example {i}: label index {c} outside head's {k} labels"
                    )));
                }
            }
            (TaskHead::Token { .. }, Target::Tags(tags)) => {
                if let Some(t) = tags
                    .iter()
                    .find(|&&t| t != IGNORE_LABEL && (t < 0 || t as usize >= k))
                {
                    return Err(Error::data(format!(
                        "example {i}: tag index {t} outside head's {k} labels"
                    )));
                }
            }
            (TaskHead::Mlm, _) => {
                return Err(Error::config("fine-tuning needs a classification head"))
            }
            _ => {
                return Err(Error::data(format!(
                    "example {i}: target kind does not match the head kind"
                )))
            }
        }
    }
    Ok(())
}

/// Train a freshly initialized head jointly with the encoder.
///
/// The warmup fraction applies to all optimizer steps across epochs.
/// `dev` is called with the weights after every epoch; the best epoch by
/// its value is returned alongside the last.
pub fn finetune(
    train: &[LabeledExample],
    checkpoint: &Checkpoint,
    head: TaskHead,
    run: &TrainRunConfig,
    dev: Option<&mut (dyn FnMut(&Checkpoint) -> Result<f64> + Send)>,
) -> Result<FinetuneOutcome> {
    run.validate()?;
    if train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    check_targets(train, &head)?;
    let base_id = checkpoint.id();
    let id = run_id("finetune", run, &base_id, &head);
    let weights = checkpoint
        .weights
        .clone()
        .with_head(head.clone(), run.seed)?;
    let total = run.total_steps(train.len());
    let mut provenance = checkpoint.provenance.clone();
    provenance.push(base_id);
    provenance.push(id.clone());
    let snapshot = |w: &Weights<f32>, steps: u64| Checkpoint {
        weights: w.clone(),
        step: checkpoint.step + steps,
        seed: run.seed,
        provenance: provenance.clone(),
    };

    let body = move || -> Result<FinetuneOutcome> {
        let mut dev = dev;
        let mut trainer = Trainer::new(weights, run, total)?;
        let mut order_rng = stream(run.seed, STREAM_ORDER);
        let mut drop_rng = stream(run.seed, STREAM_DROPOUT);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut steps = Vec::new();
        let mut epochs = Vec::new();
        let mut best: Option<(f64, usize, Checkpoint)> = None;
        for epoch in 1..=run.epochs {
            if trainer.steps >= total {
                break;
            }
            order.shuffle(&mut order_rng);
            let (mut loss_sum, mut batches, mut correct, mut counted) =
                (0.0, 0usize, 0usize, 0usize);
            for chunk in order.chunks(run.batch_size) {
                if trainer.steps >= total {
                    break;
                }
                let examples: Vec<&LabeledExample> = chunk.iter().map(|&i| &train[i]).collect();
                let batch = Batch::from_encodings(examples.iter().map(|e| &e.encoding))?;
                let targets: Vec<i64> = match &head {
                    TaskHead::Sequence { .. } => examples
                        .iter()
                        .map(|e| match e.target {
                            Target::Class(c) => c as i64,
                            Target::Tags(_) => unreachable!("checked"),
                        })
                        .collect(),
                    _ => examples
                        .iter()
                        .flat_map(|e| {
                            let tags = match &e.target {
                                Target::Tags(t) => t.as_slice(),
                                Target::Class(_) => unreachable!("checked"),
                            };
                            (0..batch.seq_len)
                                .map(move |p| tags.get(p).copied().unwrap_or(IGNORE_LABEL))
                        })
                        .collect(),
                };
                let (lr, loss, logits) = trainer.step(|tape, model| {
                    let mut mode = Mode::Train(&mut drop_rng);
                    let hidden = model.encode(tape, &batch, &mut mode)?;
                    let logits = model.head_logits(tape, hidden, &batch, &mut mode)?;
                    Ok((tape.cross_entropy(logits, &targets, IGNORE_LABEL)?, logits))
                })?;
                let k = logits.shape()[1];
                for (row, &t) in logits.data().chunks(k).zip(&targets) {
                    if t != IGNORE_LABEL {
                        counted += 1;
                        correct += usize::from(argmax(row) as i64 == t);
                    }
                }
                loss_sum += loss;
                batches += 1;
                steps.push(StepRecord {
                    step: trainer.steps,
                    epoch,
                    lr,
                    loss,
                });
            }
            let ck = snapshot(&trainer.weights, trainer.steps);
            let dev_metric = match dev.as_mut() {
                Some(f) => Some(f(&ck)?),
                None => None,
            };
            let record = EpochRecord {
                epoch,
                step: trainer.steps,
                train_loss: loss_sum / batches.max(1) as f64,
                train_accuracy: 100.0 * correct as f64 / counted.max(1) as f64,
                dev_metric,
            };
            log::info!(
                "epoch {epoch}: loss {:.4} train acc {:.2}{}",
                record.train_loss,
                record.train_accuracy,
                dev_metric
                    .map(|d| format!(" dev {d:.2}"))
                    .unwrap_or_default()
            );
            epochs.push(record);
            let score = dev_metric.unwrap_or(f64::NEG_INFINITY);
            let better = match &best {
                None => true,
                Some((s, _, _)) => dev_metric.is_none() || score > *s,
            };
            if better {
                best = Some((score, epoch, ck));
            }
        }
        let last = snapshot(&trainer.weights, trainer.steps);
        let (_, best_epoch, best) = best.unwrap_or((f64::NEG_INFINITY, 0, last.clone()));
        Ok(FinetuneOutcome {
            best,
            best_epoch,
            last,
            epochs,
            steps,
            run_id: id,
        })
    };
    in_pool(run.threads, body)?
}

/// Masked-LM evaluation under a fixed-seed masking.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmEval {
    /// Mean cross-entropy over masked positions (nats).
    pub loss: f64,
    pub perplexity: f64,
    /// Fraction of masked positions whose top-1 prediction is the original.
    pub accuracy: f64,
    pub positions: usize,
}

/// Evaluate `weights` on `encodings`, masked with `masking` from `seed`.
pub fn evaluate_mlm(
    weights: &Weights<f32>,
    encodings: &[Encoding],
    seed: u64,
    masking: &MaskingConfig,
) -> Result<MlmEval> {
    masking.validate()?;
    if encodings.is_empty() {
        return Err(Error::data("no texts to evaluate"));
    }
    let vocab_size = weights.config().vocab_size;
    let mut rng = stream(seed, STREAM_MASK);
    let refs: Vec<&Encoding> = encodings.iter().collect();
    let outcomes = mask_all(&refs, &mut rng, masking, vocab_size)?;
    let (mut nll, mut correct, mut positions) = (0.0f64, 0usize, 0usize);
    for (encs, outs) in refs.chunks(EVAL_BATCH).zip(outcomes.chunks(EVAL_BATCH)) {
        let (batch, rows, targets) = masked_batch(encs, outs)?;
        if rows.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, weights, false);
        let hidden = model.encode(&mut tape, &batch, &mut Mode::Eval)?;
        let logits = model.mlm_logits(&mut tape, hidden, Some(&rows))?;
        let loss = tape.cross_entropy(logits, &targets, IGNORE_LABEL)?;
        nll += tape.value(loss).item()? as f64 * rows.len() as f64;
        for (row, &t) in tape.value(logits).data().chunks(vocab_size).zip(&targets) {
            correct += usize::from(argmax(row) as i64 == t);
        }
        positions += rows.len();
    }
    let loss = nll / positions as f64;
    Ok(MlmEval {
        loss,
        perplexity: loss.exp(),
        accuracy: correct as f64 / positions as f64,
        positions,
    })
}

/// `exp` of the mean masked-LM cross-entropy over `texts` under the
/// default masking drawn from `seed`.
pub fn masked_perplexity<S: AsRef<str>>(
    checkpoint: &Checkpoint,
    tokenizer: &Tokenizer,
    texts: &[S],
    seed: u64,
) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::data("empty text set"));
    }
    checkpoint.check_vocab(tokenizer.vocab().len())?;
    let encodings: Vec<Encoding> = texts
        .iter()
        .map(|t| tokenizer.encode(t.as_ref()))
        .filter(|e| e.valid_len > 2)
        .collect();
    if encodings.is_empty() {
        return Err(Error::data("texts contain no tokens"));
    }
    Ok(evaluate_mlm(
        &checkpoint.weights,
        &encodings,
        seed,
        &MaskingConfig::default(),
    )?
    .perplexity)
}
