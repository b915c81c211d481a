//! Run configuration: `key = value` lines with `#` comments, resolved as
//! defaults, then file, then command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::PackingConfig;
use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::tokenizer::MaskingConfig;
use crate::training::{ScheduleKind, TrainRunConfig, Warmup};

/// Which default training hyperparameters apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Every configuration key with its resolved value.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub preset: String,
    pub model: EncoderConfig,
    pub vocab_size: usize,
    pub lowercase: bool,
    pub packing: PackingConfig,
    pub categories: Vec<String>,
    pub run: TrainRunConfig,
    pub masking: MaskingConfig,
}

pub const KEYS: &[&str] = &[
    "preset",
    "layers",
    "hidden",
    "heads",
    "ffn",
    "max_positions",
    "dropout",
    "vocab_size",
    "lowercase",
    "block_len",
    "min_tail_tokens",
    "categories",
    "batch_size",
    "epochs",
    "max_steps",
    "schedule",
    "warmup",
    "peak_lr",
    "lr_floor",
    "weight_decay",
    "grad_clip",
    "seed",
    "threads",
    "mask_prob",
    "mask_frac",
    "random_frac",
    "keep_frac",
];

const DEFAULT_PRESET: &str = "tiny";
const DEFAULT_VOCAB_SIZE: usize = 32_000;

fn typed<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key `{key}`: expected {expected}, got `{value}`")))
}

fn non_negative(key: &str, value: &str) -> Result<f64> {
    let v: f64 = typed(key, value, "a number")?;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::config(format!(
            "key `{key}`: expected a non-negative number, got `{value}`"
        )));
    }
    Ok(v)
}

impl Settings {
    pub fn defaults(stage: Stage) -> Self {
        let model = EncoderConfig::preset(DEFAULT_PRESET).expect("default preset exists");
        Settings {
            preset: DEFAULT_PRESET.into(),
            packing: PackingConfig::new(model.max_positions - 2),
            model,
            vocab_size: DEFAULT_VOCAB_SIZE,
            lowercase: false,
            categories: Vec::new(),
            run: match stage {
                Stage::Pretrain => TrainRunConfig::pretrain_defaults(),
                Stage::Finetune => TrainRunConfig::finetune_defaults(),
            },
            masking: MaskingConfig::default(),
        }
    }

    /// Resolve `file` entries over the stage defaults, then `overrides`
    /// over those. `preset` applies before the individual model keys.
    pub fn resolve(
        stage: Stage,
        file: &[(String, String)],
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut merged: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in file.iter().chain(overrides) {
            let key = KEYS
                .iter()
                .find(|&&known| known == k)
                .ok_or_else(|| Error::config(format!("unknown configuration key `{k}`")))?;
            merged.insert(key, v);
        }
        let explicit_block = merged.contains_key("block_len");
        let mut s = Settings::defaults(stage);
        if let Some(p) = merged.remove("preset") {
            s.set("preset", p)?;
        }
        for (k, v) in merged {
            s.set(k, v)?;
        }
        if !explicit_block {
            s.packing.block_len = s.model.max_positions.saturating_sub(2);
        }
        s.model.validate()?;
        s.run.validate()?;
        s.masking.validate()?;
        if s.packing.block_len == 0 {
            return Err(Error::config("key `block_len`: must be at least 1"));
        }
        Ok(s)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let int = "an integer";
        match key {
            "preset" => {
                let vocab = self.model.vocab_size;
                self.model = EncoderConfig::preset(value).map_err(|_| {
                    Error::config(format!("key `preset`: unknown preset `{value}`"))
                })?;
                self.model.vocab_size = vocab;
                self.preset = value.into();
            }
            "layers" => self.model.layers = typed(key, value, int)?,
            "hidden" => self.model.hidden = typed(key, value, int)?,
            "heads" => self.model.heads = typed(key, value, int)?,
            "ffn" => self.model.ffn = typed(key, value, int)?,
            "max_positions" => self.model.max_positions = typed(key, value, int)?,
            "dropout" => self.model.dropout = non_negative(key, value)?,
            "vocab_size" => self.vocab_size = typed(key, value, int)?,
            "lowercase" => self.lowercase = typed(key, value, "true or false")?,
            "block_len" => self.packing.block_len = typed(key, value, int)?,
            "min_tail_tokens" => self.packing.min_tail_tokens = typed(key, value, int)?,
            "categories" => {
                self.categories = value
                    .split(',')
                    .map(str::trim)
                    .filter(|c| !c.is_empty())
                    .map(String::from)
                    .collect()
            }
            "batch_size" => self.run.batch_size = typed(key, value, int)?,
            "epochs" => self.run.epochs = typed(key, value, int)?,
            "max_steps" => {
                let v: u64 = typed(key, value, int)?;
                self.run.max_steps = (v > 0).then_some(v);
            }
            "schedule" => {
                self.run.schedule = value.parse::<ScheduleKind>().map_err(|_| {
                    Error::config(format!(
                        "key `schedule`: expected warmup-linear or warmup-cosine, got `{value}`"
                    ))
                })?
            }
            "warmup" => {
                self.run.warmup = if value.contains(['.', 'e', 'E']) {
                    let f = non_negative(key, value)?;
                    if f > 1.0 {
                        return Err(Error::config(format!(
                            "key `warmup`: fraction {value} exceeds 1"
                        )));
                    }
                    Warmup::Fraction(f)
                } else {
                    Warmup::Steps(typed(key, value, "a step count or a fraction")?)
                }
            }
            "peak_lr" => self.run.peak_lr = non_negative(key, value)?,
            "lr_floor" => self.run.lr_floor = non_negative(key, value)?,
            "weight_decay" => self.run.weight_decay = non_negative(key, value)?,
            "grad_clip" => {
                let v = non_negative(key, value)?;
                self.run.grad_clip = (v > 0.0).then_some(v);
            }
            "seed" => self.run.seed = typed(key, value, int)?,
            "threads" => self.run.threads = typed(key, value, int)?,
            "mask_prob" => self.masking.select_p = non_negative(key, value)?,
            "mask_frac" => self.masking.mask_frac = non_negative(key, value)?,
            "random_frac" => self.masking.random_frac = non_negative(key, value)?,
            "keep_frac" => self.masking.keep_frac = non_negative(key, value)?,
            _ => return Err(Error::config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// All keys as strings that parse back to the same settings.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        fn s(v: impl Display) -> String {
            v.to_string()
        }
        let warmup = match self.run.warmup {
            Warmup::Steps(n) => s(n),
            Warmup::Fraction(f) => format!("{f:?}"),
        };
        let f = |v: f64| format!("{v:?}");
        [
            ("preset", self.preset.clone()),
            ("layers", s(self.model.layers)),
            ("hidden", s(self.model.hidden)),
            ("heads", s(self.model.heads)),
            ("ffn", s(self.model.ffn)),
            ("max_positions", s(self.model.max_positions)),
            ("dropout", f(self.model.dropout)),
            ("vocab_size", s(self.vocab_size)),
            ("lowercase", s(self.lowercase)),
            ("block_len", s(self.packing.block_len)),
            ("min_tail_tokens", s(self.packing.min_tail_tokens)),
            ("categories", self.categories.join(",")),
            ("batch_size", s(self.run.batch_size)),
            ("epochs", s(self.run.epochs)),
            ("max_steps", s(self.run.max_steps.unwrap_or(0))),
            ("schedule", s(self.run.schedule)),
            ("warmup", warmup),
            ("peak_lr", f(self.run.peak_lr)),
            ("lr_floor", f(self.run.lr_floor)),
            ("weight_decay", f(self.run.weight_decay)),
            ("grad_clip", f(self.run.grad_clip.unwrap_or(0.0))),
            ("seed", s(self.run.seed)),
            ("threads", s(self.run.threads)),
            ("mask_prob", f(self.masking.select_p)),
            ("mask_frac", f(self.masking.mask_frac)),
            ("random_frac", f(self.masking.random_frac)),
            ("keep_frac", f(self.masking.keep_frac)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Encoder configuration for a tokenizer of `vocab_len` entries.
    pub fn encoder_config(&self, vocab_len: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab_len,
            ..self.model.clone()
        }
    }
}

impl Default for Settings {
    fn default() -> Self {
        Settings::defaults(Stage::Finetune)
    }
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_config_str(content: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::config(format!(
                "line {}: key `{k}` set twice",
                i + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Split a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Read a configuration file. A run manifest (`.json`) supplies its
/// recorded configuration.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: super::RunManifest = serde_json::from_str(&content)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        return Ok(manifest.config.into_iter().collect());
    }
    parse_config_str(&content)
}

/// Defaults, then the file at `path`, then `overrides`.
pub fn parse_config(stage: Stage, path: Option<&Path>, overrides: &[String]) -> Result<Settings> {
    let file = match path {
        Some(p) => read_config_file(p)?,
        None => Vec::new(),
    };
    let overrides = overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    Settings::resolve(stage, &file, &overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(stage: Stage, file: &str, overrides: &[&str]) -> Result<Settings> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        let file = parse_config_str(file)?;
        let o = o
            .iter()
            .map(|s| parse_override(s))
            .collect::<Result<Vec<_>>>()?;
        Settings::resolve(stage, &file, &o)
    }

    #[test]
    fn empty_file_gives_finetune_defaults() {
        let s = resolve(Stage::Finetune, "", &[]).unwrap();
        assert_eq!(s.run.epochs, 10);
        assert_eq!(s.run.batch_size, 32);
        assert_eq!(s.run.weight_decay, 0.01);
        assert_eq!(s.run.warmup, Warmup::Fraction(0.3));
        assert_eq!(s.run.peak_lr, 3e-5);
        assert_eq!(s.run.schedule, ScheduleKind::WarmupCosine);
        assert_eq!(s.run.seed, 42);
    }

    #[test]
    fn override_beats_file() {
        let s = resolve(
            Stage::Finetune,
            "epochs = 4\nbatch_size = 8 # small\n",
            &["epochs=2"],
        )
        .unwrap();
        assert_eq!(s.run.epochs, 2);
        assert_eq!(s.run.batch_size, 8);
        let mut expected = Settings::defaults(Stage::Finetune);
        expected.run.epochs = 2;
        expected.run.batch_size = 8;
        assert_eq!(s, expected);
    }

    #[test]
    fn type_and_key_errors() {
        let e = resolve(Stage::Finetune, "", &["epochs=abc"]).unwrap_err();
        assert!(
            matches!(&e, Error::Config(m) if m.contains("epochs")),
            "{e}"
        );
        let e = resolve(Stage::Finetune, "learning_rate = 1\n", &[]).unwrap_err();
        assert!(
            matches!(&e, Error::Config(m) if m.contains("learning_rate")),
            "{e}"
        );
        assert!(resolve(Stage::Finetune, "epochs 3\n", &[]).is_err());
        assert!(resolve(Stage::Finetune, "epochs = 3\nepochs = 4\n", &[]).is_err());
        assert!(resolve(Stage::Finetune, "", &["schedule=step"]).is_err());
    }

    #[test]
    fn preset_applies_before_model_keys() {
        let s = resolve(
            Stage::Pretrain,
            "hidden = 32\nheads = 4\npreset = tiny\n",
            &[],
        )
        .unwrap();
        assert_eq!(s.model.hidden, 32);
        assert_eq!(s.model.heads, 4);
        assert_eq!(s.run.warmup, Warmup::Steps(20_000));
        assert_eq!(s.run.peak_lr, 5e-5);
    }

    #[test]
    fn map_round_trips() {
        let s = resolve(
            Stage::Pretrain,
            "warmup = 0.25\ngrad_clip = 1.0\ncategories = a, b\nmax_steps = 7\n",
            &[],
        )
        .unwrap();
        let pairs: Vec<(String, String)> = s.to_map().into_iter().collect();
        assert_eq!(pairs.len(), KEYS.len());
        let back = Settings::resolve(Stage::Finetune, &pairs, &[]).unwrap();
        assert_eq!(back, s);
    }
}
