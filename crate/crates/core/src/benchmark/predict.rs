use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{argmax, sequence_logits, token_logits, Checkpoint, TaskHead};
use crate::tokenizer::{align_word_labels, Encoding, Tokenizer};
use crate::training::{LabeledExample, Target};

use super::metrics::{score_accuracy, score_ner, score_ranked, MetricReport};
use super::{parse_example, TaskExample, TaskKind};

pub const DANET_LABELS: [&str; 2] = ["no", "yes"];
pub const NLI_LABELS: [&str; 3] = ["contradiction", "entailment", "neutral"];

/// Length of ranked predictions written for Top3 and SymptomRec.
const RANKED_K: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Prediction {
    /// Labels by descending score (Top3, SymptomRec).
    Ranked(Vec<String>),
    /// Single label (DaNet, NLI).
    Label(String),
    /// One tag per word (NER).
    Tags(Vec<String>),
}

impl Prediction {
    fn to_json(&self) -> Value {
        match self {
            Prediction::Ranked(v) | Prediction::Tags(v) => Value::from(v.clone()),
            Prediction::Label(l) => Value::from(l.clone()),
        }
    }

    fn from_json(kind: TaskKind, v: Value) -> std::result::Result<Self, String> {
        let strings = |v: Value| -> std::result::Result<Vec<String>, String> {
            serde_json::from_value(v).map_err(|e| format!("expected a list of strings: {e}"))
        };
        match kind {
            TaskKind::Top3 | TaskKind::SymRec => strings(v).map(Prediction::Ranked),
            TaskKind::Ner => strings(v).map(Prediction::Tags),
            TaskKind::DaNet | TaskKind::Nli => match v {
                Value::String(s) => Ok(Prediction::Label(s)),
                other => Err(format!("expected a string, got {other}")),
            },
        }
    }

    fn matches(&self, kind: TaskKind) -> bool {
        matches!(
            (self, kind),
            (Prediction::Ranked(_), TaskKind::Top3 | TaskKind::SymRec)
                | (Prediction::Label(_), TaskKind::DaNet | TaskKind::Nli)
                | (Prediction::Tags(_), TaskKind::Ner)
        )
    }
}

/// Predictions for one task, keyed by example id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictionSet {
    kind: TaskKind,
    entries: BTreeMap<String, Prediction>,
}

impl PredictionSet {
    /// Rejects duplicate ids, predictions of the wrong shape, and ranked
    /// lists with fewer than three distinct labels.
    pub fn new(
        kind: TaskKind,
        items: impl IntoIterator<Item = (String, Prediction)>,
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (id, p) in items {
            if !p.matches(kind) {
                return Err(Error::data(format!(
                    "id `{id}`: prediction shape does not fit task {kind}"
                )));
            }
            if let Prediction::Ranked(list) = &p {
                let distinct: BTreeSet<&String> = list.iter().collect();
                if distinct.len() < RANKED_K || distinct.len() != list.len() {
                    return Err(Error::data(format!(
                        "id `{id}`: ranked prediction needs at least {RANKED_K} distinct labels"
                    )));
                }
            }
            if entries.insert(id.clone(), p).is_some() {
                return Err(Error::data(format!("duplicate prediction for id `{id}`")));
            }
        }
        Ok(PredictionSet { kind, entries })
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn get(&self, id: &str) -> Option<&Prediction> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Prediction)> {
        self.entries.iter()
    }
}

/// Score golds against predictions into the report slot for the task.
pub fn report_for(golds: &[TaskExample], predictions: &PredictionSet) -> Result<MetricReport> {
    let mut r = MetricReport::default();
    match predictions.kind() {
        TaskKind::Top3 => r.top3 = Some(score_ranked(predictions, golds)?),
        TaskKind::SymRec => r.symrec = Some(score_ranked(predictions, golds)?),
        TaskKind::DaNet => r.danet = Some(score_accuracy(predictions, golds)?),
        TaskKind::Nli => r.nli = Some(score_accuracy(predictions, golds)?),
        TaskKind::Ner => r.ner = Some(score_ner(predictions, golds)?),
    }
    Ok(r)
}

/// An example with the model's prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredictedExample {
    pub example: TaskExample,
    pub prediction: Prediction,
}

impl PredictedExample {
    /// The example's fields plus `prediction`, as one JSON object.
    pub fn to_json(&self) -> Value {
        let mut v = serde_json::to_value(&self.example).expect("examples serialize");
        v.as_object_mut()
            .expect("examples are objects")
            .insert("prediction".into(), self.prediction.to_json());
        v
    }
}

/// Read a prediction file: gold records with an added `prediction` field.
pub fn load_predictions(path: &Path, kind: TaskKind) -> Result<(Vec<TaskExample>, PredictionSet)> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut golds = Vec::new();
    let mut preds = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut v: Value =
            serde_json::from_str(line).map_err(|e| Error::data(format!("line {n}: {e}")))?;
        let p = v
            .as_object_mut()
            .and_then(|o| o.remove("prediction"))
            .ok_or_else(|| Error::data(format!("line {n}: field `prediction` missing")))?;
        let p = Prediction::from_json(kind, p)
            .map_err(|m| Error::data(format!("line {n}: field `prediction`: {m}")))?;
        let ex = parse_example(kind, v).map_err(|e| Error::data(format!("line {n}: {e}")))?;
        ex.validate()
            .map_err(|(field, msg)| Error::data(format!("line {n}: field `{field}`: {msg}")))?;
        preds.push((ex.id().to_string(), p));
        golds.push(ex);
    }
    let set = PredictionSet::new(kind, preds)?;
    Ok((golds, set))
}

/// Head matching the task's label inventory. Fixed inventories for DaNet
/// and NLI; otherwise the sorted labels seen in `train`.
pub fn head_for(kind: TaskKind, train: &[TaskExample]) -> Result<TaskHead> {
    let collect = |labels: BTreeSet<String>| labels.into_iter().collect::<Vec<_>>();
    let head = match kind {
        TaskKind::DaNet => TaskHead::Sequence {
            labels: DANET_LABELS.iter().map(|s| s.to_string()).collect(),
        },
        TaskKind::Nli => TaskHead::Sequence {
            labels: NLI_LABELS.iter().map(|s| s.to_string()).collect(),
        },
        TaskKind::Top3 | TaskKind::SymRec => TaskHead::Sequence {
            labels: collect(
                train
                    .iter()
                    .filter_map(|e| e.gold().map(str::to_string))
                    .collect(),
            ),
        },
        TaskKind::Ner => {
            let mut tags: BTreeSet<String> = BTreeSet::new();
            tags.insert("O".into());
            for e in train {
                if let TaskExample::Ner { tags: t, .. } = e {
                    tags.extend(t.iter().cloned());
                }
            }
            TaskHead::Token {
                labels: collect(tags),
            }
        }
    };
    head.validate()?;
    Ok(head)
}

/// Model input for an example: single text for Top3/SymptomRec, a
/// question/context or premise/hypothesis pair, or pre-split NER words.
pub fn task_encoding(tokenizer: &Tokenizer, example: &TaskExample) -> Encoding {
    match example {
        TaskExample::Top3 { symptoms, .. } => tokenizer.encode(symptoms),
        TaskExample::SymptomRec { premise, .. } => tokenizer.encode(premise),
        TaskExample::DaNet {
            context, question, ..
        } => tokenizer.encode_pair(question, context),
        TaskExample::Nli {
            premise,
            hypothesis,
            ..
        } => tokenizer.encode_pair(premise, hypothesis),
        TaskExample::Ner { words, .. } => tokenizer.encode_words(words),
    }
}

/// Encode examples with targets indexed into `head`'s labels.
pub fn to_labeled(
    tokenizer: &Tokenizer,
    examples: &[TaskExample],
    head: &TaskHead,
) -> Result<Vec<LabeledExample>> {
    let index: HashMap<&str, usize> = head
        .labels()
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let lookup = |id: &str, label: &str| {
        index.get(label).copied().ok_or_else(|| {
            Error::data(format!(
                "id `{id}`: label `{label}` not in the head's label set"
            ))
        })
    };
    examples
        .iter()
        .map(|ex| {
            let encoding = task_encoding(tokenizer, ex);
            let target = match ex {
                TaskExample::Ner { id, tags, .. } => {
                    let word_labels = tags
                        .iter()
                        .map(|t| lookup(id, t).map(|i| i as i64))
                        .collect::<Result<Vec<_>>>()?;
                    Target::Tags(align_word_labels(&encoding, &word_labels)?)
                }
                _ => Target::Class(lookup(ex.id(), ex.gold().expect("classification example"))?),
            };
            Ok(LabeledExample { encoding, target })
        })
        .collect()
}

/// The `k` best labels by descending logit; ties go to the
/// lexicographically smaller label.
pub fn rank_labels(logits: &[f32], labels: &[String], k: usize) -> Result<Vec<String>> {
    if logits.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if k > labels.len() {
        return Err(Error::contract(format!(
            "cannot rank {k} of {} labels",
            labels.len()
        )));
    }
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.sort_by(|&a, &b| match logits[b].total_cmp(&logits[a]) {
        Ordering::Equal => labels[a].cmp(&labels[b]),
        o => o,
    });
    Ok(idx.into_iter().take(k).map(|i| labels[i].clone()).collect())
}

fn head_labels(checkpoint: &Checkpoint, kind: TaskKind) -> Result<&[String]> {
    let head = checkpoint
        .weights
        .head()
        .ok_or_else(|| Error::contract("checkpoint has no task head"))?;
    let ok = match head {
        TaskHead::Token { .. } => kind == TaskKind::Ner,
        TaskHead::Sequence { .. } => kind != TaskKind::Ner,
        TaskHead::Mlm => false,
    };
    if !ok {
        return Err(Error::Compatibility(format!(
            "checkpoint head does not fit task {kind}"
        )));
    }
    Ok(head.labels())
}

/// Predict every example with the checkpoint's task head.
pub fn predict(
    checkpoint: &Checkpoint,
    tokenizer: &Tokenizer,
    examples: &[TaskExample],
) -> Result<Vec<PredictedExample>> {
    let Some(first) = examples.first() else {
        return Ok(Vec::new());
    };
    let kind = first.kind();
    if let Some(e) = examples.iter().find(|e| e.kind() != kind) {
        return Err(Error::data(format!(
            "id `{}`: mixed task kinds in one dataset",
            e.id()
        )));
    }
    let labels = head_labels(checkpoint, kind)?;
    let encodings: Vec<Encoding> = examples
        .iter()
        .map(|e| task_encoding(tokenizer, e))
        .collect();
    let predictions: Vec<Prediction> = if kind == TaskKind::Ner {
        token_logits(&checkpoint.weights, &encodings)?
            .iter()
            .zip(&encodings)
            .zip(examples)
            .map(|((rows, enc), ex)| {
                let n_words = match ex {
                    TaskExample::Ner { words, .. } => words.len(),
                    _ => unreachable!("kind checked"),
                };
                let mut tags: Vec<String> = enc
                    .word_start_positions()
                    .into_iter()
                    .map(|p| labels[argmax(&rows[p])].clone())
                    .collect();
                // words cut by truncation
                tags.resize(n_words, "O".to_string());
                Prediction::Tags(tags)
            })
            .collect()
    } else {
        sequence_logits(&checkpoint.weights, &encodings)?
            .iter()
            .map(|l| {
                Ok(if kind.is_ranked() {
                    Prediction::Ranked(rank_labels(l, labels, RANKED_K)?)
                } else {
                    Prediction::Label(rank_labels(l, labels, 1)?.remove(0))
                })
            })
            .collect::<Result<_>>()?
    };
    Ok(examples
        .iter()
        .cloned()
        .zip(predictions)
        .map(|(example, prediction)| PredictedExample {
            example,
            prediction,
        })
        .collect())
}

/// Top-`k` labels for one classification example.
pub fn predict_ranked(
    checkpoint: &Checkpoint,
    tokenizer: &Tokenizer,
    example: &TaskExample,
    k: usize,
) -> Result<Vec<String>> {
    let labels = head_labels(checkpoint, example.kind())?;
    if example.kind() == TaskKind::Ner {
        return Err(Error::contract("ranking applies to classification tasks"));
    }
    let logits = sequence_logits(&checkpoint.weights, &[task_encoding(tokenizer, example)])?;
    rank_labels(&logits[0], labels, k)
}

/// Score the checkpoint on `examples` for their task.
pub fn evaluate_model(
    checkpoint: &Checkpoint,
    tokenizer: &Tokenizer,
    examples: &[TaskExample],
) -> Result<MetricReport> {
    let predicted = predict(checkpoint, tokenizer, examples)?;
    let kind = examples
        .first()
        .map(TaskExample::kind)
        .ok_or_else(|| Error::data("empty evaluation set"))?;
    let set = PredictionSet::new(
        kind,
        predicted
            .into_iter()
            .map(|p| (p.example.id().to_string(), p.prediction)),
    )?;
    report_for(examples, &set)
}

/// Write one JSON line per example, sorted by id, with the prediction added.
pub fn dump_predictions(
    checkpoint: &Checkpoint,
    tokenizer: &Tokenizer,
    examples: &[TaskExample],
    path: &Path,
) -> Result<Vec<PredictedExample>> {
    let mut predicted = predict(checkpoint, tokenizer, examples)?;
    predicted.sort_by(|a, b| a.example.id().cmp(b.example.id()));
    let mut out = String::new();
    for p in &predicted {
        out.push_str(&p.to_json().to_string());
        out.push('\n');
    }
    crate::io_util::write_atomic(path, out.as_bytes())?;
    Ok(predicted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn ranking_examples() {
        let l = labels(&["A", "B", "C"]);
        assert_eq!(rank_labels(&[2.0, 1.0, 0.0], &l, 3).unwrap(), l);
        assert_eq!(
            rank_labels(&[1.0, 1.0, 0.0], &labels(&["B", "A", "C"]), 2).unwrap(),
            labels(&["A", "B"])
        );
        assert_eq!(
            rank_labels(&[0.0, 3.0, 1.0], &l, 1).unwrap(),
            labels(&["B"])
        );
        assert!(matches!(
            rank_labels(&[0.0, 3.0, 1.0], &l, 4),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn prediction_set_invariants() {
        let ok = PredictionSet::new(
            TaskKind::Top3,
            vec![("a".into(), Prediction::Ranked(labels(&["x", "y", "z"])))],
        );
        assert!(ok.is_ok());
        let short = PredictionSet::new(
            TaskKind::Top3,
            vec![("a".into(), Prediction::Ranked(labels(&["x", "y"])))],
        );
        assert!(short.is_err());
        let repeated = PredictionSet::new(
            TaskKind::Top3,
            vec![("a".into(), Prediction::Ranked(labels(&["x", "x", "y"])))],
        );
        assert!(repeated.is_err());
        let dup = PredictionSet::new(
            TaskKind::Nli,
            vec![
                ("a".into(), Prediction::Label("neutral".into())),
                ("a".into(), Prediction::Label("neutral".into())),
            ],
        );
        assert!(dup.is_err());
        let wrong = PredictionSet::new(TaskKind::Nli, vec![("a".into(), Prediction::Tags(vec![]))]);
        assert!(wrong.is_err());
    }

    #[test]
    fn heads_for_tasks() {
        let train = vec![
            TaskExample::Top3 {
                id: "1".into(),
                symptoms: "s".into(),
                gold: "B20".into(),
            },
            TaskExample::Top3 {
                id: "2".into(),
                symptoms: "s".into(),
                gold: "A10".into(),
            },
            TaskExample::Top3 {
                id: "3".into(),
                symptoms: "s".into(),
                gold: "B20".into(),
            },
        ];
        assert_eq!(
            head_for(TaskKind::Top3, &train).unwrap(),
            TaskHead::Sequence {
                labels: labels(&["A10", "B20"])
            }
        );
        assert_eq!(head_for(TaskKind::Nli, &[]).unwrap().num_classes(), 3);
        let ner = vec![TaskExample::Ner {
            id: "1".into(),
            words: labels(&["a", "b"]),
            tags: labels(&["B-D", "I-D"]),
        }];
        assert_eq!(
            head_for(TaskKind::Ner, &ner).unwrap(),
            TaskHead::Token {
                labels: labels(&["B-D", "I-D", "O"])
            }
        );
    }
}
