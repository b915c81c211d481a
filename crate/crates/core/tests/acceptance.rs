//! Acceptance suite. Each test prints one `criterion N ...: PASS|FAIL` line.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use biolm::benchmark::{
    bio_spans, overall, score_accuracy, score_ner, score_ranked, MetricReport, NerMetrics,
    Prediction, PredictionSet, RankedMetrics, TaskExample, TaskKind,
};
use biolm::gradcheck::{model_check, op_suite, ModelCheckConfig, SuiteConfig};
use biolm::model::{
    argmax, load_checkpoint, save_checkpoint, sequence_logits, Batch, BoundModel, Checkpoint,
    EncoderConfig, Mode, TaskHead,
};
use biolm::tensor::{Tape, Tensor};
use biolm::text::clean;
use biolm::tokenizer::{
    mask_for_mlm, Encoding, MaskAction, MaskingConfig, Tokenizer, IGNORE_LABEL,
};
use biolm::training::{
    continue_pretraining, evaluate_mlm, finetune, lr_at, masked_perplexity, pretrain_mlm, AdamW,
    LabeledExample, ScheduleKind, ScheduleSpec, Target, TrainRunConfig, Warmup, ADAM_BETA1,
    ADAM_BETA2, ADAM_EPS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Written to the process stdout directly so the line survives output capture.
fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {n} {name}: {verdict} ({detail})").unwrap();
}

/// Toy pre-training settings: tiny preset without dropout, batch 32,
/// warmup over 5% of 2,000 steps to a 2e-3 peak, then linear decay.
fn toy_run(seed: u64) -> TrainRunConfig {
    let mut run = TrainRunConfig::pretrain_defaults();
    run.batch_size = 32;
    run.epochs = 1000;
    run.max_steps = Some(2000);
    run.warmup = Warmup::Fraction(0.05);
    run.peak_lr = 2e-3;
    run.seed = seed;
    run
}

fn toy_config(vocab_len: usize, max_positions: usize) -> EncoderConfig {
    let mut c = EncoderConfig::tiny();
    c.vocab_size = vocab_len;
    c.max_positions = max_positions;
    c.dropout = 0.0;
    c
}

/// Mean masked-token accuracy over ten masking draws.
fn mlm_accuracy(ck: &Checkpoint, encodings: &[Encoding]) -> f64 {
    let draws: Vec<f64> = (0..10)
        .map(|s| {
            evaluate_mlm(&ck.weights, encodings, 1000 + s, &MaskingConfig::default())
                .unwrap()
                .accuracy
        })
        .collect();
    draws.iter().sum::<f64>() / draws.len() as f64
}

#[test]
fn criterion_01_gradient_suite() {
    let t0 = Instant::now();
    let suite = SuiteConfig::default();
    assert!(suite.instances >= 20 && suite.step == 1e-5 && suite.tolerance == 1e-3);
    let ops = op_suite(&suite).unwrap();
    let model_cfg = ModelCheckConfig::default();
    assert!(model_cfg.samples == 50 && model_cfg.step == 1e-4 && model_cfg.tolerance == 1e-2);
    let model = model_check(&model_cfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let failed: Vec<&str> = ops
        .iter()
        .filter(|o| !o.passed())
        .map(|o| o.name.as_str())
        .collect();
    let worst = ops.iter().map(|o| o.max_rel_err).fold(0.0, f64::max);
    let pass = failed.is_empty() && model.passed() && secs < 120.0;
    report(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} ops, worst op rel err {worst:.2e}, model rel err {:.2e}, failed {failed:?}, {secs:.1}s",
            ops.len(),
            model.max_rel_err
        ),
    );
    assert!(pass);
}

fn ulps(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    let key = |x: f64| {
        let bits = x.to_bits() as i64;
        if bits < 0 {
            i64::MIN - bits
        } else {
            bits
        }
    };
    key(a).abs_diff(key(b))
}

#[test]
fn criterion_02_schedule_closed_forms() {
    let mut worst = 0u64;
    for kind in [ScheduleKind::WarmupLinear, ScheduleKind::WarmupCosine] {
        let peak = 1e-4;
        let spec = ScheduleSpec::new(kind, Warmup::Steps(100), peak, 1100).unwrap();
        let expected = [(0u64, 0.0), (100, peak), (600, peak / 2.0), (1100, 0.0)];
        for (step, want) in expected {
            worst = worst.max(ulps(lr_at(&spec, step).unwrap(), want));
        }
    }
    let pre = TrainRunConfig::pretrain_defaults()
        .schedule_for(200_000)
        .unwrap();
    let pre_peak = lr_at(&pre, 20_000).unwrap();
    let fine = TrainRunConfig::finetune_defaults()
        .schedule_for(1000)
        .unwrap();
    let fine_warmup = fine.warmup_steps();
    let fine_peak = lr_at(&fine, fine_warmup).unwrap();
    let pass = worst <= 1 && pre_peak == 5e-5 && fine_warmup == 300 && fine_peak == 3e-5;
    report(
        2,
        "schedule closed forms",
        pass,
        &format!("max {worst} ulp, pre-training lr at 20000 = {pre_peak:e}, fine-tuning lr at step {fine_warmup} = {fine_peak:e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_masking_statistics() {
    let vocab_size = 500;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = MaskingConfig::default();
    let (mut candidates, mut selected, mut special_labels) = (0usize, 0usize, 0usize);
    let (mut masked, mut random, mut kept) = (0usize, 0usize, 0usize);
    while candidates < 120_000 {
        let content = rng.random_range(1..60);
        let mut ids = vec![2u32];
        ids.extend((0..content).map(|_| rng.random_range(5..vocab_size as u32)));
        ids.push(3);
        let valid_len = ids.len();
        let mut enc = Encoding {
            segments: vec![0; valid_len],
            word_starts: vec![true; valid_len],
            word_count: content,
            ids,
            valid_len,
        };
        enc.pad_to(64);
        let out = mask_for_mlm(&enc, &mut rng, &config, vocab_size).unwrap();
        for (pos, (&label, action)) in out.labels.iter().zip(&out.actions).enumerate() {
            let special = pos == 0 || pos + 1 >= valid_len;
            if special {
                special_labels += usize::from(label != IGNORE_LABEL);
                continue;
            }
            candidates += 1;
            if label == IGNORE_LABEL {
                continue;
            }
            selected += 1;
            match action {
                MaskAction::Mask => masked += 1,
                MaskAction::Random => random += 1,
                MaskAction::Keep => kept += 1,
                MaskAction::Untouched => panic!("selected position left untouched"),
            }
        }
    }
    let rate = selected as f64 / candidates as f64;
    let frac = |n: usize| n as f64 / selected as f64;
    let pass = (rate - 0.15).abs() <= 0.01
        && (frac(masked) - 0.8).abs() <= 0.02
        && (frac(random) - 0.1).abs() <= 0.02
        && (frac(kept) - 0.1).abs() <= 0.02
        && special_labels == 0;
    report(
        3,
        "masking statistics",
        pass,
        &format!(
            "{candidates} candidates, selected {rate:.4}, mask/random/keep {:.4}/{:.4}/{:.4}, special labels {special_labels}",
            frac(masked),
            frac(random),
            frac(kept)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_overall_aggregation() {
    let rows: [([f64; 8], f64); 8] = [
        (
            [47.45, 70.44, 34.94, 52.05, 71.48, 77.29, 96.47, 73.15],
            67.20,
        ),
        (
            [41.24, 65.57, 20.59, 34.59, 68.75, 77.43, 96.29, 72.57],
            62.32,
        ),
        (
            [44.04, 69.71, 23.69, 38.09, 64.06, 78.06, 96.59, 74.07],
            63.04,
        ),
        (
            [45.74, 72.14, 40.92, 54.37, 74.61, 82.42, 97.09, 77.79],
            70.21,
        ),
        (
            [45.13, 72.26, 26.92, 41.99, 51.17, 78.62, 96.45, 74.04],
            61.64,
        ),
        (
            [43.55, 68.86, 28.94, 44.55, 53.91, 80.31, 96.63, 75.97],
            62.69,
        ),
        (
            [46.72, 72.87, 44.01, 58.95, 76.17, 82.77, 97.19, 77.81],
            71.54,
        ),
        (
            [25.06, 48.54, 7.23, 12.53, 93.36, 83.26, 96.09, 76.18],
            61.89,
        ),
    ];
    let mut worst = 0.0f64;
    for (m, want) in rows {
        let r = MetricReport {
            top3: Some(RankedMetrics {
                acc: m[0],
                hit3: m[1],
            }),
            symrec: Some(RankedMetrics {
                acc: m[2],
                hit3: m[3],
            }),
            danet: Some(m[4]),
            nli: Some(m[5]),
            ner: Some(NerMetrics {
                acc: m[6],
                f1: m[7],
            }),
        };
        worst = worst.max((overall(&r).unwrap() - want).abs());
    }
    let pass = worst <= 0.01;
    report(
        4,
        "overall aggregation",
        pass,
        &format!("8 rows, max deviation {worst:.4}"),
    );
    assert!(pass);
}

const LABELS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];
const TAGS: [&str; 5] = ["O", "B-X", "I-X", "B-Y", "I-Y"];

fn brute_ranked(golds: &[&str], preds: &[Vec<String>]) -> (f64, f64) {
    let n = golds.len() as f64;
    let top1 = golds.iter().zip(preds).filter(|(g, p)| p[0] == **g).count() as f64;
    let top3 = golds
        .iter()
        .zip(preds)
        .filter(|(g, p)| p[..3].contains(&g.to_string()))
        .count() as f64;
    (100.0 * top1 / n, 100.0 * top3 / n)
}

/// Every `(type, start, end)` interval that forms a span: it opens with
/// `B-T`, or with an `I-T` not preceded by a `T` tag, continues with `I-T`
/// only, and is not followed by `I-T`.
fn brute_spans(tags: &[String]) -> BTreeSet<(String, usize, usize)> {
    let kind = |t: &str| t.split_once('-').map(|(_, k)| k.to_string());
    let mut out = BTreeSet::new();
    for start in 0..tags.len() {
        let Some(t) = kind(&tags[start]) else {
            continue;
        };
        let inside = format!("I-{t}");
        let opens = tags[start].starts_with("B-")
            || start == 0
            || kind(&tags[start - 1]).as_deref() != Some(t.as_str());
        if !opens {
            continue;
        }
        for end in start..tags.len() {
            if tags[start + 1..=end].iter().any(|x| *x != inside) {
                break;
            }
            if end + 1 == tags.len() || tags[end + 1] != inside {
                out.insert((t.clone(), start, end));
            }
        }
    }
    out
}

fn brute_ner(golds: &[Vec<String>], preds: &[Vec<String>]) -> (f64, f64) {
    let (mut tokens, mut hits, mut tp, mut ng, mut np) = (0, 0, 0, 0, 0);
    for (g, p) in golds.iter().zip(preds) {
        tokens += g.len();
        hits += (0..g.len()).filter(|&i| g[i] == p[i]).count();
        let gs = brute_spans(g);
        let ps = brute_spans(p);
        tp += gs.intersection(&ps).count();
        ng += gs.len();
        np += ps.len();
    }
    let f1 = if ng == 0 && np == 0 {
        100.0
    } else {
        100.0 * 2.0 * tp as f64 / (ng + np) as f64
    };
    (100.0 * hits as f64 / tokens as f64, f1)
}

fn valid_bio(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    let mut tags: Vec<String> = Vec::with_capacity(len);
    for _ in 0..len {
        let mut t = TAGS[rng.random_range(0..TAGS.len())];
        if let Some(k) = t.strip_prefix("I-") {
            let prev = tags
                .last()
                .and_then(|p| p.split_once('-').map(|(_, pk)| pk == k));
            if prev != Some(true) {
                t = if k == "X" { "B-X" } else { "B-Y" };
            }
        }
        tags.push(t.to_string());
    }
    tags
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

#[test]
fn criterion_05_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sets = 1000;
    let mut agree = [0usize; 3];
    for _ in 0..sets {
        let n = rng.random_range(1..30);
        // ranked
        let golds: Vec<&str> = (0..n)
            .map(|_| LABELS[rng.random_range(0..LABELS.len())])
            .collect();
        let preds: Vec<Vec<String>> = (0..n)
            .map(|_| {
                let mut l: Vec<String> = LABELS.iter().map(|s| s.to_string()).collect();
                for i in (1..l.len()).rev() {
                    l.swap(i, rng.random_range(0..=i));
                }
                l.truncate(rng.random_range(3..=LABELS.len()));
                l
            })
            .collect();
        let examples: Vec<TaskExample> = golds
            .iter()
            .enumerate()
            .map(|(i, g)| TaskExample::Top3 {
                id: format!("r{i}"),
                symptoms: "s".into(),
                gold: g.to_string(),
            })
            .collect();
        let set = PredictionSet::new(
            TaskKind::Top3,
            preds
                .iter()
                .enumerate()
                .map(|(i, p)| (format!("r{i}"), Prediction::Ranked(p.clone()))),
        )
        .unwrap();
        let m = score_ranked(&set, &examples).unwrap();
        let (a, h) = brute_ranked(&golds, &preds);
        agree[0] += usize::from(close(m.acc, a) && close(m.hit3, h));
        // single label
        let labels = ["contradiction", "entailment", "neutral"];
        let gold: Vec<&str> = (0..n).map(|_| labels[rng.random_range(0..3)]).collect();
        let pred: Vec<&str> = (0..n).map(|_| labels[rng.random_range(0..3)]).collect();
        let examples: Vec<TaskExample> = gold
            .iter()
            .enumerate()
            .map(|(i, g)| TaskExample::Nli {
                id: format!("n{i}"),
                premise: "p".into(),
                hypothesis: "h".into(),
                gold: g.to_string(),
            })
            .collect();
        let set = PredictionSet::new(
            TaskKind::Nli,
            pred.iter()
                .enumerate()
                .map(|(i, p)| (format!("n{i}"), Prediction::Label(p.to_string()))),
        )
        .unwrap();
        let acc = score_accuracy(&set, &examples).unwrap();
        let want = 100.0 * gold.iter().zip(&pred).filter(|(g, p)| g == p).count() as f64 / n as f64;
        agree[1] += usize::from(close(acc, want));
        // ner, predictions may be ill-formed
        let gold: Vec<Vec<String>> = (0..n)
            .map(|_| {
                let len = rng.random_range(1..12);
                valid_bio(&mut rng, len)
            })
            .collect();
        let pred: Vec<Vec<String>> = gold
            .iter()
            .map(|g| {
                (0..g.len())
                    .map(|_| TAGS[rng.random_range(0..TAGS.len())].to_string())
                    .collect()
            })
            .collect();
        let examples: Vec<TaskExample> = gold
            .iter()
            .enumerate()
            .map(|(i, t)| TaskExample::Ner {
                id: format!("e{i}"),
                words: (0..t.len()).map(|j| format!("w{j}")).collect(),
                tags: t.clone(),
            })
            .collect();
        let set = PredictionSet::new(
            TaskKind::Ner,
            pred.iter()
                .enumerate()
                .map(|(i, p)| (format!("e{i}"), Prediction::Tags(p.clone()))),
        )
        .unwrap();
        let m = score_ner(&set, &examples).unwrap();
        let (a, f) = brute_ner(&gold, &pred);
        agree[2] += usize::from(close(m.acc, a) && close(m.f1, f));
        debug_assert!(gold
            .iter()
            .all(|g| bio_spans(g).len() == brute_spans(g).len()));
    }
    let pass = agree.iter().all(|&a| a == sets);
    report(
        5,
        "metric oracles",
        pass,
        &format!(
            "agreement ranked {}/{sets}, accuracy {}/{sets}, ner {}/{sets}",
            agree[0], agree[1], agree[2]
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_toy_memorization() {
    let t0 = Instant::now();
    let texts = common::fact_sentences("", 10);
    let tok = common::whole_word_tokenizer(&texts, 16);
    let blocks = common::sentence_blocks(&texts, &tok);
    let run = toy_run(1);
    let init = Checkpoint::init(&toy_config(tok.vocab().len(), 16), run.seed).unwrap();
    let out = pretrain_mlm(&blocks, &tok, init, &run, &MaskingConfig::default()).unwrap();
    let encodings: Vec<Encoding> = texts.iter().map(|t| tok.encode(t)).collect();
    let acc = mlm_accuracy(&out.checkpoint, &encodings);
    let steps = out.history.len();
    let secs = t0.elapsed().as_secs_f64();
    let pass = acc >= 0.90 && steps <= 2000 && secs <= 900.0;
    report(
        6,
        "toy memorization",
        pass,
        &format!(
            "{} sentences, {steps} steps, masked top-1 accuracy {:.2}%, {secs:.0}s",
            texts.len(),
            100.0 * acc
        ),
    );
    assert!(pass);
}

fn classify_accuracy(ck: &Checkpoint, examples: &[LabeledExample]) -> f64 {
    let encodings: Vec<Encoding> = examples.iter().map(|e| e.encoding.clone()).collect();
    let logits = sequence_logits(&ck.weights, &encodings).unwrap();
    let hits = logits
        .iter()
        .zip(examples)
        .filter(|(l, e)| matches!(e.target, Target::Class(c) if c == argmax(l)))
        .count();
    100.0 * hits as f64 / examples.len() as f64
}

fn binary_head() -> TaskHead {
    TaskHead::Sequence {
        labels: vec!["no".into(), "yes".into()],
    }
}

/// Fine-tuning defaults with a peak suited to a tiny model.
fn toy_finetune_run() -> TrainRunConfig {
    let mut run = TrainRunConfig::finetune_defaults();
    run.peak_lr = 1e-3;
    run.batch_size = 16;
    run
}

#[test]
fn criterion_07_domain_shift() {
    let t0 = Instant::now();
    let corpus_a = common::fact_sentences("", 10);
    let all_b = common::relabel(&common::fact_sentences("", 10), "zy");
    let (held_b, train_b): (Vec<(usize, String)>, Vec<(usize, String)>) = all_b
        .into_iter()
        .enumerate()
        .partition(|(i, _)| i % 10 == 0);
    let held_b: Vec<String> = held_b.into_iter().map(|(_, t)| t).collect();
    let train_b: Vec<String> = train_b.into_iter().map(|(_, t)| t).collect();
    let mut both = corpus_a.clone();
    both.extend(train_b.iter().cloned());
    both.extend(held_b.iter().cloned());
    let tok = common::whole_word_tokenizer(&both, 16);

    let run = toy_run(7);
    let init = Checkpoint::init(&toy_config(tok.vocab().len(), 16), run.seed).unwrap();
    let base = pretrain_mlm(
        &common::sentence_blocks(&corpus_a, &tok),
        &tok,
        init,
        &run,
        &MaskingConfig::default(),
    )
    .unwrap()
    .checkpoint;
    let continued = continue_pretraining(
        &base,
        &common::sentence_blocks(&train_b, &tok),
        &tok,
        &run,
        &MaskingConfig::default(),
    )
    .unwrap()
    .checkpoint;
    let ppl = |ck: &Checkpoint| {
        (0..5)
            .map(|s| masked_perplexity(ck, &tok, &held_b, 70 + s).unwrap())
            .sum::<f64>()
            / 5.0
    };
    let (ppl_base, ppl_cont) = (ppl(&base), ppl(&continued));

    // label: the sentence's fact is among the first five
    let disease = |t: &str, i: usize| t.contains(&format!("zy{}", common::lexicon("da", 10)[i]));
    let label = |t: &String| usize::from((0..5).any(|i| disease(t, i)));
    let labeled = |texts: &[String]| -> Vec<LabeledExample> {
        texts
            .iter()
            .map(|t| LabeledExample {
                encoding: tok.encode(t),
                target: Target::Class(label(t)),
            })
            .collect()
    };
    let (train, test) = (labeled(&train_b), labeled(&held_b));
    let ft = toy_finetune_run();
    let acc_base = classify_accuracy(
        &finetune(&train, &base, binary_head(), &ft, None)
            .unwrap()
            .last,
        &test,
    );
    let acc_cont = classify_accuracy(
        &finetune(&train, &continued, binary_head(), &ft, None)
            .unwrap()
            .last,
        &test,
    );
    let secs = t0.elapsed().as_secs_f64();
    let pass = ppl_cont < ppl_base && acc_cont >= acc_base && secs <= 1800.0;
    report(
        7,
        "domain shift",
        pass,
        &format!(
            "held-out B perplexity base {ppl_base:.2} continued {ppl_cont:.2}; fine-tuned accuracy base {acc_base:.1}% continued {acc_cont:.1}%; {secs:.0}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_finetune_learnability() {
    let (texts, labels) = common::separable_task(256, 8);
    let tok = common::whole_word_tokenizer(&texts, 16);
    let init = Checkpoint::init(&toy_config(tok.vocab().len(), 16), 8).unwrap();
    let train: Vec<LabeledExample> = texts
        .iter()
        .zip(&labels)
        .map(|(t, &l)| LabeledExample {
            encoding: tok.encode(t),
            target: Target::Class(l),
        })
        .collect();
    let run = toy_finetune_run();
    let out = finetune(&train, &init, binary_head(), &run, None).unwrap();
    let acc = classify_accuracy(&out.last, &train);
    let pass = acc >= 95.0 && out.epochs.len() <= 10;
    report(
        8,
        "fine-tune learnability",
        pass,
        &format!("{} epochs, training accuracy {acc:.1}%", out.epochs.len()),
    );
    assert!(pass);
}

fn forward_bits(ck: &Checkpoint, enc: &Encoding) -> Vec<u32> {
    let batch = Batch::from_encodings([enc]).unwrap();
    let mut tape = Tape::<f32>::new();
    let model = BoundModel::bind(&mut tape, &ck.weights, false);
    let h = model.encode(&mut tape, &batch, &mut Mode::Eval).unwrap();
    let logits = model.mlm_logits(&mut tape, h, None).unwrap();
    tape.value(logits)
        .data()
        .iter()
        .map(|x| x.to_bits())
        .collect()
}

fn biolm(dir: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_biolm"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{}",
        String::from_utf8_lossy(&status.stderr)
    );
}

#[test]
fn criterion_09_round_trips() {
    // tokenizer
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let words = common::lexicon("ke", 300);
    let lines: Vec<String> = (0..1000)
        .map(|_| {
            let n = rng.random_range(1..12);
            clean(
                &(0..n)
                    .map(|_| words[rng.random_range(0..words.len())].as_str())
                    .collect::<Vec<_>>()
                    .join("  "),
            )
        })
        .collect();
    let tok = Tokenizer::new(
        biolm::tokenizer::train_vocab(&lines, 200, true).unwrap(),
        64,
    )
    .unwrap();
    let identical = lines
        .iter()
        .filter(|l| tok.decode(&tok.tokenize(l)).unwrap() == **l)
        .count();

    // checkpoint
    let dir = tempfile::tempdir().unwrap();
    let mut c = EncoderConfig::tiny();
    c.vocab_size = tok.vocab().len();
    let ck = Checkpoint::init(&c, 9).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ck, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let enc = tok.encode(&lines[0]);
    let same_forward = forward_bits(&ck, &enc) == forward_bits(&loaded, &enc)
        && ck.to_bytes() == loaded.to_bytes();

    // cli rerun
    let corpus = common::fact_sentences("", 4).join("\n") + "\n";
    std::fs::write(dir.path().join("corpus.txt"), corpus).unwrap();
    biolm(dir.path(), &["train-tokenizer", "corpus.txt", "vocab.txt"]);
    let pretrain = |out: &str| {
        biolm(
            dir.path(),
            &[
                "pretrain",
                "corpus.txt",
                "vocab.txt",
                out,
                "--threads",
                "1",
                "--seed",
                "11",
                "--set",
                "preset=tiny",
                "--set",
                "max_positions=32",
                "--set",
                "batch_size=8",
                "--set",
                "max_steps=30",
                "--set",
                "warmup=3",
                "--set",
                "min_tail_tokens=1",
            ],
        );
        std::fs::read(dir.path().join(format!("{out}.history.jsonl"))).unwrap()
    };
    let (h1, h2) = (pretrain("a.ckpt"), pretrain("b.ckpt"));
    let same_history = !h1.is_empty() && h1 == h2;

    let pass = identical == lines.len() && same_forward && same_history;
    report(
        9,
        "round trips",
        pass,
        &format!(
            "decode(encode) identity {identical}/{}, checkpoint forward bit-identical {same_forward}, rerun history byte-identical {same_history} ({} bytes)",
            lines.len(),
            h1.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_adamw_recurrence() {
    let (lr, wd) = (1e-2, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut param = vec![Tensor::<f64>::new(vec![1], vec![0.7]).unwrap()];
    let mut opt = AdamW::new(&param, wd);
    let (mut w, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
    let mut drift = 0.0f64;
    for t in 1..=100 {
        let g: f64 = rng.random_range(-1.0..1.0);
        let grad = [Tensor::new(vec![1], vec![g]).unwrap()];
        opt.step(&mut param, &grad, &[true], lr).unwrap();
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m / (1.0 - ADAM_BETA1.powi(t));
        let v_hat = v / (1.0 - ADAM_BETA2.powi(t));
        w = w - lr * wd * w - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        drift = drift.max((param[0].data()[0] - w).abs() / w.abs());
    }

    let start = 1.25f64;
    let mut p = vec![Tensor::<f64>::new(vec![1], vec![start]).unwrap()];
    let mut opt = AdamW::new(&p, wd);
    opt.step(
        &mut p,
        &[Tensor::new(vec![1], vec![0.0]).unwrap()],
        &[true],
        lr,
    )
    .unwrap();
    let decayed = p[0].data()[0];
    let exact = decayed == start * (1.0 - lr * wd);

    let pass = drift <= 1e-12 && exact;
    report(
        10,
        "adamw recurrence",
        pass,
        &format!("100-step max relative drift {drift:.2e}, zero-gradient step {start} -> {decayed} (expected {})", start * (1.0 - lr * wd)),
    );
    assert!(pass);
}
