//! The `biolm` command line: argument parsing, configuration resolution,
//! subcommand dispatch and run manifests.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmark::{
    dump_predictions, evaluate_model, head_for, load_predictions, load_task_dataset, overall,
    report_for, to_labeled, MetricReport, TaskKind,
};
use crate::corpus::{self, ArticleRecord};
use crate::error::{Error, Result};
use crate::gradcheck::{model_check, op_suite, ModelCheckConfig, SuiteConfig};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::tokenizer::{train_vocab, SubwordVocab, Tokenizer};
use crate::training::{
    append_history, continue_pretraining, finetune, pretrain_mlm, HistoryLine, PretrainOutcome,
};

pub use config::{
    parse_config, parse_config_str, parse_override, read_config_file, Settings, Stage, KEYS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "biolm",
    version,
    about = "Encoder pre-training, fine-tuning and benchmark scoring"
)]
struct Cli {
    /// Configuration file of `key = value` lines, or a run manifest.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Kernel worker threads; 1 guarantees determinism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    task: Option<TaskKind>,
    /// Where to write the run manifest (defaults next to the first output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Document, word, category and year statistics of an article corpus.
    CorpusStats { corpus: PathBuf },
    /// Learn a subword vocabulary from a corpus.
    TrainTokenizer { corpus: PathBuf, vocab: PathBuf },
    /// Masked-LM pre-training from a fresh initialization.
    Pretrain {
        corpus: PathBuf,
        vocab: PathBuf,
        out: PathBuf,
    },
    /// Further masked-LM training of an existing checkpoint.
    ContinuePretrain {
        base: PathBuf,
        corpus: PathBuf,
        vocab: PathBuf,
        out: PathBuf,
    },
    /// Train a task head and the encoder on a labeled dataset.
    Finetune {
        checkpoint: PathBuf,
        vocab: PathBuf,
        train: PathBuf,
        out: PathBuf,
        /// Development set for best-epoch selection and the final report.
        #[arg(long)]
        dev: Option<PathBuf>,
    },
    /// Write predictions for a dataset as JSON lines.
    Predict {
        checkpoint: PathBuf,
        vocab: PathBuf,
        data: PathBuf,
        out: PathBuf,
    },
    /// Score prediction files; `TASK=PATH`, or a bare path with `--task`.
    Evaluate {
        #[arg(required = true)]
        predictions: Vec<String>,
    },
    /// Finite-difference gradient checks of every operation and the tiny model.
    Gradcheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::CorpusStats { .. } => "corpus-stats",
            Command::TrainTokenizer { .. } => "train-tokenizer",
            Command::Pretrain { .. } => "pretrain",
            Command::ContinuePretrain { .. } => "continue-pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Gradcheck => "gradcheck",
        }
    }

    fn stage(&self) -> Stage {
        match self {
            Command::TrainTokenizer { .. }
            | Command::Pretrain { .. }
            | Command::ContinuePretrain { .. } => Stage::Pretrain,
            _ => Stage::Finetune,
        }
    }
}

/// Record of one invocation, sufficient to repeat it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    /// Every configuration key after defaults, file and overrides.
    pub config: BTreeMap<String, String>,
    pub task: Option<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: u64,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    /// SHA-256 of each input and output file, keyed by path.
    pub digests: BTreeMap<String, String>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// What a command read and wrote.
#[derive(Default)]
struct Artifacts {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(t) = cli.threads {
        overrides.push(format!("threads={t}"));
    }
    let settings = parse_config(cli.command.stage(), cli.config.as_deref(), &overrides)?;
    let started = now_ms();
    let threads = settings.run.threads;
    let artifacts = if threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| dispatch(&cli, &settings))?
    } else {
        dispatch(&cli, &settings)?
    };
    let target = cli.manifest.clone().or_else(|| {
        artifacts
            .outputs
            .first()
            .map(|o| sibling(o, ".manifest.json"))
    });
    if let Some(path) = target {
        let mut digests = BTreeMap::new();
        for p in artifacts.inputs.iter().chain(&artifacts.outputs) {
            if p.is_file() {
                digests.insert(p.display().to_string(), file_digest(p)?);
            }
        }
        let manifest = RunManifest {
            command: cli.command.name().into(),
            config: settings.to_map(),
            task: cli.task.map(|t| t.to_string()),
            inputs: artifacts.inputs,
            outputs: artifacts.outputs,
            seed: settings.run.seed,
            started_unix_ms: started,
            finished_unix_ms: now_ms(),
            digests,
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        crate::io_util::write_atomic(&path, &json)?;
    }
    Ok(())
}

fn require_task(task: Option<TaskKind>) -> Result<TaskKind> {
    task.ok_or_else(|| Error::config("this command needs --task {top3|symrec|danet|nli|ner}"))
}

fn print_json(v: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(v).expect("output serializes");
    let mut out = std::io::stdout().lock();
    writeln!(out, "{s}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

/// Article records from JSON lines, or one document per line for `.txt`.
fn load_corpus(path: &Path, settings: &Settings) -> Result<Vec<ArticleRecord>> {
    let records = if path.extension().is_some_and(|e| e == "txt") {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        corpus::records_from_lines(&content)
    } else {
        corpus::ingest(path)?
    };
    Ok(if settings.categories.is_empty() {
        records
    } else {
        corpus::filter_by_category(records, &settings.categories)
    })
}

fn load_tokenizer(path: &Path, max_len: usize) -> Result<Tokenizer> {
    Tokenizer::new(SubwordVocab::load(path)?, max_len)
}

fn write_history(path: &Path, lines: &[HistoryLine]) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(Error::io(path, e)),
    }
    append_history(path, lines)
}

fn pretrain_blocks(
    records: &[ArticleRecord],
    settings: &Settings,
    tok: &Tokenizer,
    max_positions: usize,
) -> Result<Vec<corpus::PretrainBlock>> {
    if settings.packing.block_len + 2 > max_positions {
        return Err(Error::config(format!(
            "key `block_len`: {} plus CLS/SEP exceeds {max_positions} positions",
            settings.packing.block_len
        )));
    }
    let blocks: Vec<_> = corpus::to_pretraining_stream(records, settings.packing, tok)?.collect();
    if blocks.is_empty() {
        return Err(Error::data("corpus yields no pre-training blocks"));
    }
    Ok(blocks)
}

fn finish_pretraining(outcome: PretrainOutcome, out: &Path) -> Result<PathBuf> {
    save_checkpoint(&outcome.checkpoint, out)?;
    let history_path = sibling(out, ".history.jsonl");
    let lines: Vec<HistoryLine> = outcome
        .history
        .iter()
        .cloned()
        .map(HistoryLine::Step)
        .collect();
    write_history(&history_path, &lines)?;
    print_json(&serde_json::json!({
        "checkpoint": outcome.checkpoint.id(),
        "run": outcome.run_id,
        "steps": outcome.history.len(),
        "final_loss": outcome.history.last().map(|r| r.loss),
    }))?;
    Ok(history_path)
}

fn dispatch(cli: &Cli, settings: &Settings) -> Result<Artifacts> {
    let mut art = Artifacts::default();
    match &cli.command {
        Command::CorpusStats { corpus: path } => {
            art.inputs.push(path.clone());
            let records = load_corpus(path, settings)?;
            print_json(&corpus::stats(&records))?;
        }
        Command::TrainTokenizer {
            corpus: path,
            vocab,
        } => {
            art.inputs.push(path.clone());
            let records = load_corpus(path, settings)?;
            let v = train_vocab(
                records.iter().map(|r| r.full_text()),
                settings.vocab_size,
                settings.lowercase,
            )?;
            v.save(vocab)?;
            log::info!(
                "vocabulary of {} entries written to {}",
                v.len(),
                vocab.display()
            );
            print_json(&serde_json::json!({ "entries": v.len() }))?;
            art.outputs.push(vocab.clone());
        }
        Command::Pretrain {
            corpus: path,
            vocab,
            out,
        } => {
            art.inputs.extend([path.clone(), vocab.clone()]);
            let max_positions = settings.model.max_positions;
            let tok = load_tokenizer(vocab, max_positions)?;
            let records = load_corpus(path, settings)?;
            let blocks = pretrain_blocks(&records, settings, &tok, max_positions)?;
            let base = Checkpoint::init(
                &settings.encoder_config(tok.vocab().len()),
                settings.run.seed,
            )?;
            log::info!("pre-training on {} blocks", blocks.len());
            let outcome = pretrain_mlm(&blocks, &tok, base, &settings.run, &settings.masking)?;
            let history = finish_pretraining(outcome, out)?;
            art.outputs.extend([out.clone(), history]);
        }
        Command::ContinuePretrain {
            base,
            corpus: path,
            vocab,
            out,
        } => {
            art.inputs
                .extend([base.clone(), path.clone(), vocab.clone()]);
            let base = load_checkpoint(base)?;
            let max_positions = base.config().max_positions;
            let tok = load_tokenizer(vocab, max_positions)?;
            let records = load_corpus(path, settings)?;
            let blocks = pretrain_blocks(&records, settings, &tok, max_positions)?;
            log::info!("continuing pre-training on {} blocks", blocks.len());
            let outcome =
                continue_pretraining(&base, &blocks, &tok, &settings.run, &settings.masking)?;
            let history = finish_pretraining(outcome, out)?;
            art.outputs.extend([out.clone(), history]);
        }
        Command::Finetune {
            checkpoint,
            vocab,
            train,
            out,
            dev,
        } => {
            let kind = require_task(cli.task)?;
            art.inputs
                .extend([checkpoint.clone(), vocab.clone(), train.clone()]);
            art.inputs.extend(dev.clone());
            let base = load_checkpoint(checkpoint)?;
            let tok = load_tokenizer(vocab, base.config().max_positions)?;
            base.check_vocab(tok.vocab().len())?;
            let train_set = load_task_dataset(train, kind)?;
            let head = head_for(kind, &train_set)?;
            let labeled = to_labeled(&tok, &train_set, &head)?;
            let dev_set = dev
                .as_deref()
                .map(|p| load_task_dataset(p, kind))
                .transpose()?;
            let mut dev_fn = dev_set.as_ref().map(|d| {
                let tok = &tok;
                move |ck: &Checkpoint| -> Result<f64> {
                    let report = evaluate_model(ck, tok, d)?;
                    Ok(report.task_value(kind).expect("report covers its task"))
                }
            });
            let outcome = finetune(
                &labeled,
                &base,
                head,
                &settings.run,
                dev_fn
                    .as_mut()
                    .map(|f| f as &mut (dyn FnMut(&Checkpoint) -> Result<f64> + Send)),
            )?;
            save_checkpoint(&outcome.best, out)?;
            art.outputs.push(out.clone());
            let history_path = sibling(out, ".history.jsonl");
            let lines: Vec<HistoryLine> = outcome
                .steps
                .iter()
                .cloned()
                .map(HistoryLine::Step)
                .chain(outcome.epochs.iter().cloned().map(HistoryLine::Epoch))
                .collect();
            write_history(&history_path, &lines)?;
            art.outputs.push(history_path);
            let mut summary = serde_json::json!({
                "checkpoint": outcome.best.id(),
                "run": outcome.run_id,
                "best_epoch": outcome.best_epoch,
                "steps": outcome.steps.len(),
            });
            if let Some(d) = &dev_set {
                let report = evaluate_model(&outcome.best, &tok, d)?.to_json();
                let report_path = sibling(out, ".report.json");
                let bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
                crate::io_util::write_atomic(&report_path, &bytes)?;
                art.outputs.push(report_path);
                summary["dev"] = report;
            }
            print_json(&summary)?;
        }
        Command::Predict {
            checkpoint,
            vocab,
            data,
            out,
        } => {
            let kind = require_task(cli.task)?;
            art.inputs
                .extend([checkpoint.clone(), vocab.clone(), data.clone()]);
            let ck = load_checkpoint(checkpoint)?;
            let tok = load_tokenizer(vocab, ck.config().max_positions)?;
            ck.check_vocab(tok.vocab().len())?;
            let examples = load_task_dataset(data, kind)?;
            let predicted = dump_predictions(&ck, &tok, &examples, out)?;
            log::info!(
                "{} predictions written to {}",
                predicted.len(),
                out.display()
            );
            art.outputs.push(out.clone());
        }
        Command::Evaluate { predictions } => {
            let mut report = MetricReport::default();
            let mut seen = Vec::new();
            for arg in predictions {
                let (kind, path) = match arg.split_once('=') {
                    Some((k, p)) if k.parse::<TaskKind>().is_ok() => {
                        (k.parse::<TaskKind>().expect("checked"), PathBuf::from(p))
                    }
                    _ => (require_task(cli.task)?, PathBuf::from(arg)),
                };
                if seen.contains(&kind) {
                    return Err(Error::config(format!("task `{kind}` given twice")));
                }
                seen.push(kind);
                let (golds, preds) = load_predictions(&path, kind)?;
                report.merge(&report_for(&golds, &preds)?);
                art.inputs.push(path);
            }
            if let Ok(o) = overall(&report) {
                log::info!("overall {o:.4}");
            }
            print_json(&report.to_json())?;
        }
        Command::Gradcheck => {
            let mut outcomes = op_suite(&SuiteConfig::default())?;
            outcomes.push(model_check(&ModelCheckConfig::default())?);
            let mut out = std::io::stdout().lock();
            let mut failed = 0;
            for o in &outcomes {
                let verdict = if o.passed() { "ok" } else { "FAIL" };
                failed += usize::from(!o.passed());
                writeln!(
                    out,
                    "{verdict:4} {:24} instances={:3} max_rel_err={:.3e} tol={:.0e}",
                    o.name, o.instances, o.max_rel_err, o.tolerance
                )
                .map_err(|e| Error::io(Path::new("<stdout>"), e))?;
            }
            if failed > 0 {
                return Err(Error::Check(format!(
                    "{failed} of {} gradient checks",
                    outcomes.len()
                )));
            }
        }
    }
    Ok(art)
}
