use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::predict::{Prediction, PredictionSet};
use super::{parse_tag, TaskExample, TaskKind};

/// Accuracy at rank 1 and hit@3, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedMetrics {
    pub acc: f64,
    pub hit3: f64,
}

/// Token accuracy and exact-span micro F1, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NerMetrics {
    pub acc: f64,
    pub f1: f64,
}

fn percent(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

/// Look up each gold example's prediction; every gold id must be covered
/// and no prediction may refer to an unknown id.
fn paired<'a>(
    predictions: &'a PredictionSet,
    golds: &'a [TaskExample],
) -> Result<Vec<(&'a TaskExample, &'a Prediction)>> {
    if golds.is_empty() {
        return Err(Error::contract("no gold examples to score"));
    }
    let pairs = golds
        .iter()
        .map(|g| {
            predictions
                .get(g.id())
                .map(|p| (g, p))
                .ok_or_else(|| Error::contract(format!("no prediction for id `{}`", g.id())))
        })
        .collect::<Result<Vec<_>>>()?;
    if predictions.len() != golds.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} gold examples",
            predictions.len(),
            golds.len()
        )));
    }
    Ok(pairs)
}

/// Accuracy (gold at rank 1) and hit@3 (gold among the first three).
pub fn score_ranked(predictions: &PredictionSet, golds: &[TaskExample]) -> Result<RankedMetrics> {
    let (mut top1, mut top3) = (0, 0);
    let pairs = paired(predictions, golds)?;
    for (g, p) in &pairs {
        let Prediction::Ranked(list) = p else {
            return Err(Error::contract(format!(
                "id `{}`: expected a ranked prediction",
                g.id()
            )));
        };
        let gold = g
            .gold()
            .ok_or_else(|| Error::contract(format!("id `{}` has no single gold label", g.id())))?;
        top1 += usize::from(list.first().map(String::as_str) == Some(gold));
        top3 += usize::from(list.iter().take(3).any(|l| l == gold));
    }
    Ok(RankedMetrics {
        acc: percent(top1, pairs.len()),
        hit3: percent(top3, pairs.len()),
    })
}

/// Exact-match accuracy of single-label predictions.
pub fn score_accuracy(predictions: &PredictionSet, golds: &[TaskExample]) -> Result<f64> {
    let pairs = paired(predictions, golds)?;
    let mut hits = 0;
    for (g, p) in &pairs {
        let label = match p {
            Prediction::Label(l) => l.as_str(),
            Prediction::Ranked(list) => list.first().map(String::as_str).unwrap_or(""),
            Prediction::Tags(_) => {
                return Err(Error::contract(format!(
                    "id `{}`: expected a label prediction",
                    g.id()
                )))
            }
        };
        let gold = g
            .gold()
            .ok_or_else(|| Error::contract(format!("id `{}` has no single gold label", g.id())))?;
        hits += usize::from(label == gold);
    }
    Ok(percent(hits, pairs.len()))
}

/// Typed entity span with inclusive token bounds.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

/// Replace each `I-X` that does not continue an `X` entity with `B-X`.
/// Returns the repaired tags and the number of repairs.
pub fn repair_bio(tags: &[String]) -> (Vec<String>, usize) {
    let mut out = Vec::with_capacity(tags.len());
    let mut prev: Option<String> = None;
    let mut repairs = 0;
    for tag in tags {
        match parse_tag(tag) {
            Ok(Some((false, t))) if prev.as_deref() != Some(t) => {
                repairs += 1;
                out.push(format!("B-{t}"));
                prev = Some(t.to_string());
            }
            Ok(Some((_, t))) => {
                out.push(tag.clone());
                prev = Some(t.to_string());
            }
            _ => {
                out.push(tag.clone());
                prev = None;
            }
        }
    }
    (out, repairs)
}

/// Decode well-formed BIO tags into spans. Unparseable tags act as `O`.
pub fn bio_spans(tags: &[String]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, tag) in tags.iter().enumerate() {
        match parse_tag(tag) {
            Ok(Some((false, t))) if open.as_ref().is_some_and(|s| s.kind == t) => {
                if let Some(s) = open.as_mut() {
                    s.end = i;
                }
            }
            Ok(Some((_, t))) => {
                spans.extend(open.take());
                open = Some(Span {
                    kind: t.to_string(),
                    start: i,
                    end: i,
                });
            }
            _ => spans.extend(open.take()),
        }
    }
    spans.extend(open);
    spans
}

/// Token accuracy over raw predicted tags, and micro F1 over exact
/// `(type, start, end)` spans after repairing orphan `I-X` predictions.
/// When neither gold nor predictions contain any span, F1 is 100.
pub fn score_ner(predictions: &PredictionSet, golds: &[TaskExample]) -> Result<NerMetrics> {
    let pairs = paired(predictions, golds)?;
    let (mut tokens, mut token_hits) = (0usize, 0usize);
    let (mut n_gold, mut n_pred, mut tp) = (0usize, 0usize, 0usize);
    let mut repairs = 0;
    for (g, p) in &pairs {
        let TaskExample::Ner { id, tags: gold, .. } = g else {
            return Err(Error::contract(format!(
                "id `{}` is not an NER example",
                g.id()
            )));
        };
        let Prediction::Tags(pred) = p else {
            return Err(Error::contract(format!(
                "id `{id}`: expected a tag prediction"
            )));
        };
        if pred.len() != gold.len() {
            return Err(Error::data(format!(
                "id `{id}`: {} predicted tags for {} words",
                pred.len(),
                gold.len()
            )));
        }
        tokens += gold.len();
        token_hits += gold.iter().zip(pred).filter(|(a, b)| a == b).count();
        let (fixed, r) = repair_bio(pred);
        repairs += r;
        let gs = bio_spans(gold);
        let ps = bio_spans(&fixed);
        tp += ps.iter().filter(|s| gs.contains(s)).count();
        n_gold += gs.len();
        n_pred += ps.len();
    }
    if repairs > 0 {
        log::warn!("repaired {repairs} orphan I- tags in NER predictions");
    }
    let f1 = if n_gold == 0 && n_pred == 0 {
        100.0
    } else if tp == 0 {
        0.0
    } else {
        let precision = tp as f64 / n_pred as f64;
        let recall = tp as f64 / n_gold as f64;
        100.0 * 2.0 * precision * recall / (precision + recall)
    };
    Ok(NerMetrics {
        acc: if tokens == 0 {
            100.0
        } else {
            percent(token_hits, tokens)
        },
        f1,
    })
}

/// Per-task metrics in percent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub top3: Option<RankedMetrics>,
    pub symrec: Option<RankedMetrics>,
    pub danet: Option<f64>,
    pub nli: Option<f64>,
    pub ner: Option<NerMetrics>,
}

impl MetricReport {
    /// Mean of a task's metrics (the value itself for single-metric tasks).
    pub fn task_value(&self, kind: TaskKind) -> Option<f64> {
        match kind {
            TaskKind::Top3 => self.top3.map(|m| (m.acc + m.hit3) / 2.0),
            TaskKind::SymRec => self.symrec.map(|m| (m.acc + m.hit3) / 2.0),
            TaskKind::DaNet => self.danet,
            TaskKind::Nli => self.nli,
            TaskKind::Ner => self.ner.map(|m| (m.acc + m.f1) / 2.0),
        }
    }

    pub fn tasks(&self) -> Vec<TaskKind> {
        TaskKind::ALL
            .into_iter()
            .filter(|&k| self.task_value(k).is_some())
            .collect()
    }

    /// Merge another report's tasks into this one (later wins).
    pub fn merge(&mut self, other: &MetricReport) {
        self.top3 = other.top3.or(self.top3);
        self.symrec = other.symrec.or(self.symrec);
        self.danet = other.danet.or(self.danet);
        self.nli = other.nli.or(self.nli);
        self.ner = other.ner.or(self.ner);
    }

    /// Structured report: per-task metrics rounded for display, the overall
    /// score when all five tasks are present, and the metric definitions.
    pub fn to_json(&self) -> serde_json::Value {
        let r = |x: f64| round_half_up(x, 2);
        let mut tasks = BTreeMap::new();
        if let Some(m) = self.top3 {
            tasks.insert(
                "top3",
                serde_json::json!({"acc": r(m.acc), "hit3": r(m.hit3)}),
            );
        }
        if let Some(m) = self.symrec {
            tasks.insert(
                "symrec",
                serde_json::json!({"acc": r(m.acc), "hit3": r(m.hit3)}),
            );
        }
        if let Some(v) = self.danet {
            tasks.insert("danet", serde_json::json!({"acc": r(v)}));
        }
        if let Some(v) = self.nli {
            tasks.insert("nli", serde_json::json!({"acc": r(v)}));
        }
        if let Some(m) = self.ner {
            tasks.insert("ner", serde_json::json!({"acc": r(m.acc), "f1": r(m.f1)}));
        }
        serde_json::json!({
            "tasks": tasks,
            "overall": overall(self).ok().map(r),
            "definitions": {
                "acc (top3, symrec)": "percent of examples whose gold label is ranked first",
                "hit3": "percent of examples whose gold label is among the first three ranked labels",
                "acc (danet, nli)": "percent exact-match of the predicted label",
                "acc (ner)": "percent of words whose predicted tag equals the gold tag",
                "f1 (ner)": "micro F1 over exact (type, start, end) BIO spans; orphan I- predictions start a span; 100 when no spans exist on either side",
                "overall": "mean over the five tasks of each task's metric mean",
            },
        })
    }
}

/// Mean over the five tasks of each task's metric mean.
pub fn overall(report: &MetricReport) -> Result<f64> {
    let mut sum = 0.0;
    for kind in TaskKind::ALL {
        sum += report.task_value(kind).ok_or_else(|| {
            Error::contract(format!("overall needs all five tasks; `{kind}` missing"))
        })?;
    }
    Ok(sum / TaskKind::ALL.len() as f64)
}

/// Round half away from zero at `decimals` places, treating values within
/// floating-point noise of a tie as the tie.
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let f = 10f64.powi(decimals as i32);
    let s = x.abs() * f;
    let r = (s + 0.5 + 1e-9 * s.max(1.0)).floor();
    (r / f).copysign(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn top3(id: &str, gold: &str) -> TaskExample {
        TaskExample::Top3 {
            id: id.into(),
            symptoms: "x".into(),
            gold: gold.into(),
        }
    }

    fn nli(id: &str, gold: &str) -> TaskExample {
        TaskExample::Nli {
            id: id.into(),
            premise: "p".into(),
            hypothesis: "h".into(),
            gold: gold.into(),
        }
    }

    fn ner(id: &str, tags: &[&str]) -> TaskExample {
        TaskExample::Ner {
            id: id.into(),
            words: tags.iter().map(|_| "w".to_string()).collect(),
            tags: s(tags),
        }
    }

    fn set(kind: TaskKind, items: Vec<(&str, Prediction)>) -> PredictionSet {
        PredictionSet::new(kind, items.into_iter().map(|(i, p)| (i.to_string(), p))).unwrap()
    }

    #[test]
    fn ranked_contributions() {
        let golds = vec![top3("a", "A"), top3("b", "C"), top3("c", "Z")];
        let preds = set(
            TaskKind::Top3,
            vec![
                ("a", Prediction::Ranked(s(&["A", "B", "C"]))),
                ("b", Prediction::Ranked(s(&["A", "B", "C"]))),
                ("c", Prediction::Ranked(s(&["A", "B", "C"]))),
            ],
        );
        let m = score_ranked(&preds, &golds).unwrap();
        assert_eq!(m.acc, 100.0 / 3.0);
        assert_eq!(m.hit3, 200.0 / 3.0);
    }

    #[test]
    fn uncovered_id_is_contract_error() {
        let golds = vec![nli("a", "neutral"), nli("b", "neutral")];
        let preds = set(
            TaskKind::Nli,
            vec![("a", Prediction::Label("neutral".into()))],
        );
        assert!(matches!(
            score_accuracy(&preds, &golds),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn accuracy_examples() {
        let golds: Vec<_> = ["neutral", "entailment", "neutral", "contradiction"]
            .iter()
            .enumerate()
            .map(|(i, g)| nli(&i.to_string(), g))
            .collect();
        let mk = |labels: [&str; 4]| {
            set(
                TaskKind::Nli,
                labels
                    .iter()
                    .enumerate()
                    .map(|(i, l)| (["0", "1", "2", "3"][i], Prediction::Label(l.to_string())))
                    .collect(),
            )
        };
        let all = mk(["neutral", "entailment", "neutral", "contradiction"]);
        let none = mk(["entailment", "neutral", "contradiction", "neutral"]);
        let half = mk(["neutral", "entailment", "entailment", "neutral"]);
        assert_eq!(score_accuracy(&all, &golds).unwrap(), 100.0);
        assert_eq!(score_accuracy(&none, &golds).unwrap(), 0.0);
        assert_eq!(score_accuracy(&half, &golds).unwrap(), 50.0);
    }

    #[test]
    fn ner_examples() {
        let golds = vec![ner("a", &["B-D", "I-D", "O", "B-S"])];
        let same = set(
            TaskKind::Ner,
            vec![("a", Prediction::Tags(s(&["B-D", "I-D", "O", "B-S"])))],
        );
        assert_eq!(
            score_ner(&same, &golds).unwrap(),
            NerMetrics {
                acc: 100.0,
                f1: 100.0
            }
        );
        let pred = set(
            TaskKind::Ner,
            vec![("a", Prediction::Tags(s(&["B-D", "O", "O", "B-S"])))],
        );
        assert_eq!(
            score_ner(&pred, &golds).unwrap(),
            NerMetrics {
                acc: 75.0,
                f1: 50.0
            }
        );

        let empty = vec![ner("a", &["O", "O"])];
        let pred = set(TaskKind::Ner, vec![("a", Prediction::Tags(s(&["O", "O"])))]);
        assert_eq!(
            score_ner(&pred, &empty).unwrap(),
            NerMetrics {
                acc: 100.0,
                f1: 100.0
            }
        );

        let short = set(TaskKind::Ner, vec![("a", Prediction::Tags(s(&["O"])))]);
        assert!(matches!(score_ner(&short, &empty), Err(Error::Data(_))));
    }

    #[test]
    fn orphan_inside_tags_start_spans() {
        let (fixed, n) = repair_bio(&s(&["O", "I-D", "I-D", "I-S"]));
        assert_eq!(fixed, s(&["O", "B-D", "I-D", "B-S"]));
        assert_eq!(n, 2);
        assert_eq!(
            bio_spans(&fixed),
            vec![
                Span {
                    kind: "D".into(),
                    start: 1,
                    end: 2
                },
                Span {
                    kind: "S".into(),
                    start: 3,
                    end: 3
                }
            ]
        );
    }

    fn row(v: [f64; 8]) -> MetricReport {
        MetricReport {
            top3: Some(RankedMetrics {
                acc: v[0],
                hit3: v[1],
            }),
            symrec: Some(RankedMetrics {
                acc: v[2],
                hit3: v[3],
            }),
            danet: Some(v[4]),
            nli: Some(v[5]),
            ner: Some(NerMetrics {
                acc: v[6],
                f1: v[7],
            }),
        }
    }

    #[test]
    fn overall_examples() {
        let ru_roberta = row([45.74, 72.14, 40.92, 54.37, 74.61, 82.42, 97.09, 77.79]);
        assert_eq!(round_half_up(overall(&ru_roberta).unwrap(), 2), 70.21);
        let bio = row([46.72, 72.87, 44.01, 58.95, 76.17, 82.77, 97.19, 77.81]);
        assert_eq!(round_half_up(overall(&bio).unwrap(), 2), 71.54);
        let human = row([25.06, 48.54, 7.23, 12.53, 93.36, 83.26, 96.09, 76.18]);
        assert_eq!(round_half_up(overall(&human).unwrap(), 2), 61.89);
        let mut partial = human;
        partial.nli = None;
        assert!(matches!(overall(&partial), Err(Error::Contract(_))));
    }

    #[test]
    fn rounding_half_up() {
        assert_eq!(round_half_up(67.204, 2), 67.2);
        assert_eq!(round_half_up(0.125, 2), 0.13);
        assert_eq!(round_half_up(2.675, 2), 2.68);
        assert_eq!(round_half_up(-1.005, 2), -1.01);
        assert_eq!(round_half_up(61.637, 2), 61.64);
    }
}
