//! The five medical benchmark task types: records, loaders, scorers and
//! aggregate reporting, plus model-side prediction helpers.

mod metrics;
mod predict;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use metrics::{
    bio_spans, overall, repair_bio, round_half_up, score_accuracy, score_ner, score_ranked,
    MetricReport, NerMetrics, RankedMetrics, Span,
};
pub use predict::{
    dump_predictions, evaluate_model, head_for, load_predictions, predict, predict_ranked,
    rank_labels, report_for, task_encoding, to_labeled, PredictedExample, Prediction,
    PredictionSet, DANET_LABELS, NLI_LABELS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Top3,
    SymRec,
    DaNet,
    Nli,
    Ner,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Top3,
        TaskKind::SymRec,
        TaskKind::DaNet,
        TaskKind::Nli,
        TaskKind::Ner,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Top3 => "top3",
            TaskKind::SymRec => "symrec",
            TaskKind::DaNet => "danet",
            TaskKind::Nli => "nli",
            TaskKind::Ner => "ner",
        }
    }

    /// Ranked tasks are scored by accuracy and hit@3.
    pub fn is_ranked(self) -> bool {
        matches!(self, TaskKind::Top3 | TaskKind::SymRec)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown task `{s}` (expected top3, symrec, danet, nli, ner)"
                ))
            })
    }
}

/// One labelled benchmark record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum TaskExample {
    Top3 {
        id: String,
        symptoms: String,
        gold: String,
    },
    SymptomRec {
        id: String,
        premise: String,
        gold: String,
    },
    DaNet {
        id: String,
        context: String,
        question: String,
        gold: String,
    },
    Nli {
        id: String,
        premise: String,
        hypothesis: String,
        gold: String,
    },
    Ner {
        id: String,
        words: Vec<String>,
        tags: Vec<String>,
    },
}

impl TaskExample {
    pub fn id(&self) -> &str {
        match self {
            TaskExample::Top3 { id, .. }
            | TaskExample::SymptomRec { id, .. }
            | TaskExample::DaNet { id, .. }
            | TaskExample::Nli { id, .. }
            | TaskExample::Ner { id, .. } => id,
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            TaskExample::Top3 { .. } => TaskKind::Top3,
            TaskExample::SymptomRec { .. } => TaskKind::SymRec,
            TaskExample::DaNet { .. } => TaskKind::DaNet,
            TaskExample::Nli { .. } => TaskKind::Nli,
            TaskExample::Ner { .. } => TaskKind::Ner,
        }
    }

    /// Gold label of a classification record; `None` for NER.
    pub fn gold(&self) -> Option<&str> {
        match self {
            TaskExample::Top3 { gold, .. }
            | TaskExample::SymptomRec { gold, .. }
            | TaskExample::DaNet { gold, .. }
            | TaskExample::Nli { gold, .. } => Some(gold),
            TaskExample::Ner { .. } => None,
        }
    }

    pub(crate) fn validate(&self) -> std::result::Result<(), (String, String)> {
        let err = |field: &str, msg: String| Err((field.to_string(), msg));
        if self.id().trim().is_empty() {
            return err("id", "empty".into());
        }
        match self {
            TaskExample::Top3 { gold, .. } | TaskExample::SymptomRec { gold, .. }
                if gold.trim().is_empty() =>
            {
                err("gold", "empty label".into())
            }
            TaskExample::DaNet { gold, .. } if !DANET_LABELS.contains(&gold.as_str()) => {
                err("gold", format!("`{gold}` is not yes/no"))
            }
            TaskExample::Nli { gold, .. } if !NLI_LABELS.contains(&gold.as_str()) => err(
                "gold",
                format!("`{gold}` is not entailment/contradiction/neutral"),
            ),
            TaskExample::Ner { words, tags, .. } => {
                if words.len() != tags.len() {
                    return err(
                        "tags",
                        format!("{} tags for {} words", tags.len(), words.len()),
                    );
                }
                validate_bio(tags).or_else(|m| err("tags", m))
            }
            _ => Ok(()),
        }
    }
}

/// Tag type of `B-X`/`I-X`; `None` for `O`.
pub(crate) fn parse_tag(tag: &str) -> std::result::Result<Option<(bool, &str)>, String> {
    if tag == "O" {
        return Ok(None);
    }
    match tag.split_once('-') {
        Some(("B", t)) if !t.is_empty() => Ok(Some((true, t))),
        Some(("I", t)) if !t.is_empty() => Ok(Some((false, t))),
        _ => Err(format!("malformed tag `{tag}`")),
    }
}

/// Every tag is `O`, `B-X` or `I-X`, and each `I-X` follows `B-X` or `I-X`.
pub fn validate_bio(tags: &[String]) -> std::result::Result<(), String> {
    let mut prev: Option<&str> = None;
    for (i, tag) in tags.iter().enumerate() {
        match parse_tag(tag)? {
            None => prev = None,
            Some((true, t)) => prev = Some(t),
            Some((false, t)) => {
                if prev != Some(t) {
                    return Err(format!(
                        "`{tag}` at position {i} does not continue a `{t}` entity"
                    ));
                }
            }
        }
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Top3Record {
    id: String,
    symptoms: String,
    gold: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SymRecRecord {
    id: String,
    premise: String,
    gold: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DaNetRecord {
    id: String,
    context: String,
    question: String,
    gold: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NliRecord {
    id: String,
    premise: String,
    hypothesis: String,
    gold: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NerRecord {
    id: String,
    words: Vec<String>,
    tags: Vec<String>,
}

pub(crate) fn parse_example(
    kind: TaskKind,
    value: serde_json::Value,
) -> serde_json::Result<TaskExample> {
    Ok(match kind {
        TaskKind::Top3 => {
            let r: Top3Record = serde_json::from_value(value)?;
            TaskExample::Top3 {
                id: r.id,
                symptoms: r.symptoms,
                gold: r.gold,
            }
        }
        TaskKind::SymRec => {
            let r: SymRecRecord = serde_json::from_value(value)?;
            TaskExample::SymptomRec {
                id: r.id,
                premise: r.premise,
                gold: r.gold,
            }
        }
        TaskKind::DaNet => {
            let r: DaNetRecord = serde_json::from_value(value)?;
            TaskExample::DaNet {
                id: r.id,
                context: r.context,
                question: r.question,
                gold: r.gold,
            }
        }
        TaskKind::Nli => {
            let r: NliRecord = serde_json::from_value(value)?;
            TaskExample::Nli {
                id: r.id,
                premise: r.premise,
                hypothesis: r.hypothesis,
                gold: r.gold,
            }
        }
        TaskKind::Ner => {
            let r: NerRecord = serde_json::from_value(value)?;
            TaskExample::Ner {
                id: r.id,
                words: r.words,
                tags: r.tags,
            }
        }
    })
}

/// Parse and validate JSON-lines task records. Errors carry the 1-based
/// line number and the offending field.
pub fn parse_task_dataset(content: &str, kind: TaskKind) -> Result<Vec<TaskExample>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::data(format!("line {n}: {e}")))?;
        let ex = parse_example(kind, value).map_err(|e| Error::data(format!("line {n}: {e}")))?;
        ex.validate()
            .map_err(|(field, msg)| Error::data(format!("line {n}: field `{field}`: {msg}")))?;
        if !seen.insert(ex.id().to_string()) {
            return Err(Error::data(format!("line {n}: duplicate id `{}`", ex.id())));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_task_dataset(path: &Path, kind: TaskKind) -> Result<Vec<TaskExample>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_task_dataset(&content, kind)
}

/// One JSON line per example.
pub fn serialize_task_dataset(examples: &[TaskExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("examples serialize"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_records() {
        let content = r#"{"id":"1","premise":"p","hypothesis":"h","gold":"neutral"}
{"id":"2","premise":"p","hypothesis":"h","gold":"entailment"}

{"id":"3","premise":"p","hypothesis":"h","gold":"contradiction"}"#;
        let ex = parse_task_dataset(content, TaskKind::Nli).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[1].gold(), Some("entailment"));
        assert_eq!(
            parse_task_dataset(&serialize_task_dataset(&ex), TaskKind::Nli).unwrap(),
            ex
        );
    }

    #[test]
    fn duplicate_id_named() {
        let content = r#"{"id":"q7","symptoms":"s","gold":"A01"}
{"id":"q7","symptoms":"t","gold":"B02"}"#;
        let err = parse_task_dataset(content, TaskKind::Top3)
            .unwrap_err()
            .to_string();
        assert!(err.contains("q7") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn ner_length_mismatch_has_line() {
        let content = r#"{"id":"a","words":["x","y"],"tags":["O","O"]}
{"id":"b","words":["x","y"],"tags":["O"]}"#;
        let err = parse_task_dataset(content, TaskKind::Ner)
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2") && err.contains("tags"), "{err}");
    }

    #[test]
    fn malformed_labels_rejected() {
        let bad = [
            (
                TaskKind::DaNet,
                r#"{"id":"a","context":"c","question":"q","gold":"maybe"}"#,
            ),
            (
                TaskKind::Nli,
                r#"{"id":"a","premise":"p","hypothesis":"h","gold":"yes"}"#,
            ),
            (
                TaskKind::Ner,
                r#"{"id":"a","words":["x","y"],"tags":["O","I-D"]}"#,
            ),
            (TaskKind::Ner, r#"{"id":"a","words":["x"],"tags":["X-D"]}"#),
            (TaskKind::Top3, r#"{"id":"a","symptoms":"s"}"#),
            (
                TaskKind::Top3,
                r#"{"id":"a","symptoms":"s","gold":"A","extra":1}"#,
            ),
        ];
        for (kind, line) in bad {
            let err = parse_task_dataset(line, kind).unwrap_err().to_string();
            assert!(err.contains("line 1"), "{err}");
        }
    }

    #[test]
    fn bio_rules() {
        let t = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(validate_bio(&t(&["B-D", "I-D", "O", "B-S", "I-S"])).is_ok());
        assert!(validate_bio(&t(&["B-D", "I-S"])).is_err());
        assert!(validate_bio(&t(&["I-D"])).is_err());
    }

    #[test]
    fn task_names_round_trip() {
        for k in TaskKind::ALL {
            assert_eq!(k.name().parse::<TaskKind>().unwrap(), k);
        }
        assert!("foo".parse::<TaskKind>().is_err());
    }
}
