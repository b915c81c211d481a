//! Article corpora: JSON-lines ingestion, cleaning, statistics, and packing
//! into fixed-length pre-training blocks.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;
use crate::tokenizer::{Tokenizer, CLS_ID, SEP_ID};

pub use crate::text::clean;

pub const MIN_YEAR: i32 = 1900;
pub const MAX_YEAR: i32 = 2100;

/// Default minimum length of a document's final partial block.
pub const DEFAULT_MIN_TAIL_TOKENS: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArticleRecord {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub body: String,
    pub category: String,
    pub year: i32,
}

impl ArticleRecord {
    /// Cleaned title, abstract and body joined by newlines.
    pub fn full_text(&self) -> String {
        [&self.title, &self.abstract_text, &self.body]
            .iter()
            .map(|s| text::clean(s))
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn word_count(&self) -> u64 {
        [&self.title, &self.abstract_text, &self.body]
            .iter()
            .map(|s| text::words(&text::clean(s)).count() as u64)
            .sum()
    }

    fn validate(&self, line: usize) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::data(format!("line {line}: field `id` is empty")));
        }
        if text::clean(&self.title).is_empty() {
            return Err(Error::data(format!("line {line}: field `title` is empty")));
        }
        if !(MIN_YEAR..=MAX_YEAR).contains(&self.year) {
            return Err(Error::data(format!(
                "line {line}: field `year` = {} outside [{MIN_YEAR}, {MAX_YEAR}]",
                self.year
            )));
        }
        Ok(())
    }
}

/// Parse and validate a corpus held in memory (one JSON record per line;
/// blank lines are skipped). Line numbers in errors are 1-based.
pub fn parse_records(content: &str) -> Result<Vec<ArticleRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ArticleRecord =
            serde_json::from_str(line).map_err(|e| Error::data(format!("line {line_no}: {e}")))?;
        rec.validate(line_no)?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::data(format!(
                "line {line_no}: duplicate id `{}`",
                rec.id
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn ingest(path: &Path) -> Result<Vec<ArticleRecord>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&content)
}

/// One JSON line per record, in order.
pub fn serialize_records(records: &[ArticleRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn filter_by_category<S: AsRef<str>>(
    records: Vec<ArticleRecord>,
    allowed: &[S],
) -> Vec<ArticleRecord> {
    let allowed: HashSet<&str> = allowed.iter().map(AsRef::as_ref).collect();
    records
        .into_iter()
        .filter(|r| allowed.contains(r.category.as_str()))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub documents: u64,
    pub words: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: u64,
    pub words: u64,
    pub categories: BTreeMap<String, CategoryStats>,
    /// `(earliest, latest)` publication year; `None` for an empty corpus.
    pub year_range: Option<(i32, i32)>,
}

pub fn stats(records: &[ArticleRecord]) -> CorpusStats {
    let mut s = CorpusStats::default();
    for r in records {
        let words = r.word_count();
        s.documents += 1;
        s.words += words;
        let c = s.categories.entry(r.category.clone()).or_default();
        c.documents += 1;
        c.words += words;
        s.year_range = Some(match s.year_range {
            None => (r.year, r.year),
            Some((lo, hi)) => (lo.min(r.year), hi.max(r.year)),
        });
    }
    s
}

/// A framed pre-training input drawn from a single document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretrainBlock {
    pub document: usize,
    /// `[CLS] content [SEP]`.
    pub ids: Vec<u32>,
}

/// Packing parameters. `block_len` counts content tokens; each block adds
/// `[CLS]`/`[SEP]`, so the model needs `block_len + 2` positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PackingConfig {
    pub block_len: usize,
    pub min_tail_tokens: usize,
}

impl PackingConfig {
    pub fn new(block_len: usize) -> Self {
        PackingConfig {
            block_len,
            min_tail_tokens: DEFAULT_MIN_TAIL_TOKENS,
        }
    }
}

/// Lazily tokenize records and cut each into blocks of `block_len` content
/// tokens. Blocks never span two documents; a document's final short block
/// is kept only when it has at least `min_tail_tokens` tokens.
pub fn to_pretraining_stream<'a>(
    records: &'a [ArticleRecord],
    config: PackingConfig,
    tokenizer: &'a Tokenizer,
) -> Result<impl Iterator<Item = PretrainBlock> + 'a> {
    if config.block_len == 0 {
        return Err(Error::config("block length must be at least 1"));
    }
    Ok(records.iter().enumerate().flat_map(move |(doc, r)| {
        let tokens = tokenizer.tokenize(&r.full_text());
        tokens
            .chunks(config.block_len)
            .filter(|c| c.len() == config.block_len || c.len() >= config.min_tail_tokens)
            .map(|c| {
                let mut ids = Vec::with_capacity(c.len() + 2);
                ids.push(CLS_ID);
                ids.extend_from_slice(c);
                ids.push(SEP_ID);
                PretrainBlock { document: doc, ids }
            })
            .collect::<Vec<_>>()
    }))
}

/// Plain-text lines (one document per line) wrapped as records, for corpora
/// that lack article metadata.
pub fn records_from_lines(content: &str) -> Vec<ArticleRecord> {
    content
        .lines()
        .filter(|l| !text::clean(l).is_empty())
        .enumerate()
        .map(|(i, l)| ArticleRecord {
            id: format!("line-{}", i + 1),
            title: l.to_string(),
            abstract_text: String::new(),
            body: String::new(),
            category: String::new(),
            year: 2000,
        })
        .collect()
}
