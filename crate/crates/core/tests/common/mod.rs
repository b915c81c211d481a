//! Synthetic corpora and tasks shared by the integration tests.

#![allow(dead_code)]

use biolm::corpus::{to_pretraining_stream, ArticleRecord, PackingConfig, PretrainBlock};
use biolm::tokenizer::{train_vocab, Tokenizer};

const LETTERS: &[u8] = b"bcdfghjklmnpqrstvwxz";

/// `n` distinct pseudo-words sharing `stem`.
pub fn lexicon(stem: &str, n: usize) -> Vec<String> {
    assert!(n <= LETTERS.len() * LETTERS.len());
    (0..n)
        .map(|i| {
            let a = LETTERS[i % LETTERS.len()] as char;
            let b = LETTERS[i / LETTERS.len()] as char;
            format!("{stem}{a}o{b}")
        })
        .collect()
}

const TEMPLATES: [&str; 20] = [
    "the patient with {d} reports {s} and takes {m}",
    "{d} often presents as {s} treated with {m}",
    "for {s} caused by {d} doctors prescribe {m}",
    "{m} relieves {s} in {d}",
    "a case of {d} showed {s} after stopping {m}",
    "chronic {d} leads to {s} unless {m} is given",
    "{s} is the main sign of {d} and {m} helps",
    "clinicians treat {d} with {m} to reduce {s}",
    "without {m} the {s} of {d} gets worse",
    "in {d} the drug {m} controls {s}",
    "severe {s} points to {d} so start {m}",
    "{m} is approved for {d} with {s}",
    "trials of {m} in {d} measured {s}",
    "early {d} causes mild {s} and responds to {m}",
    "the {s} seen in {d} fades on {m}",
    "guidelines list {m} for {s} from {d}",
    "patients on {m} for {d} report less {s}",
    "{d} with persistent {s} needs {m}",
    "a review of {d} links {s} and {m}",
    "nurses give {m} when {d} triggers {s}",
];

/// `facts` disease/symptom/drug triples, each written in every template.
/// Any one content word of a sentence identifies the other two.
pub fn fact_sentences(prefix: &str, facts: usize) -> Vec<String> {
    let ds = lexicon(&format!("{prefix}da"), facts);
    let ss = lexicon(&format!("{prefix}si"), facts);
    let ms = lexicon(&format!("{prefix}mu"), facts);
    let mut out = Vec::new();
    for t in TEMPLATES {
        for i in 0..facts {
            out.push(
                t.replace("{d}", &ds[i])
                    .replace("{s}", &ss[i])
                    .replace("{m}", &ms[i]),
            );
        }
    }
    out
}

pub fn records(texts: &[String]) -> Vec<ArticleRecord> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| ArticleRecord {
            id: format!("doc-{i}"),
            title: t.clone(),
            abstract_text: String::new(),
            body: String::new(),
            category: "clinical medicine".into(),
            year: 2020,
        })
        .collect()
}

/// One block per sentence.
pub fn sentence_blocks(texts: &[String], tok: &Tokenizer) -> Vec<PretrainBlock> {
    let recs = records(texts);
    let packing = PackingConfig {
        block_len: tok.max_len() - 2,
        min_tail_tokens: 1,
    };
    to_pretraining_stream(&recs, packing, tok)
        .unwrap()
        .collect()
}

/// Tokenizer whose vocabulary holds every word of `texts` whole.
pub fn whole_word_tokenizer(texts: &[String], max_len: usize) -> Tokenizer {
    let vocab = train_vocab(texts, 4000, true).unwrap();
    Tokenizer::new(vocab, max_len).unwrap()
}

/// Prefix every word, giving a corpus with a vocabulary disjoint from
/// the unprefixed one.
pub fn relabel(texts: &[String], prefix: &str) -> Vec<String> {
    texts
        .iter()
        .map(|t| {
            t.split(' ')
                .map(|w| format!("{prefix}{w}"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Two-class sentences of filler words plus one cue word naming the
/// class, separable by the presence of either cue.
pub fn separable_task(n: usize, seed: u64) -> (Vec<String>, Vec<usize>) {
    use rand::{Rng, SeedableRng};
    let fillers = lexicon("fe", 40);
    let cues = ["cuebo", "cuezo"];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let mut words: Vec<&str> = (0..7)
                .map(|_| fillers[rng.random_range(0..fillers.len())].as_str())
                .collect();
            words.insert(rng.random_range(0..=words.len()), cues[label]);
            (words.join(" "), label)
        })
        .unzip()
}
