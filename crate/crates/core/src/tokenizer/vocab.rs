use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text;

use super::{CONTINUATION, SPECIALS};

const FILE_MAGIC: &str = "#biolm-vocab 1";

/// One vocabulary entry: a string plus whether it continues a word.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Piece {
    pub text: String,
    pub continuation: bool,
}

impl Piece {
    pub fn initial(text: impl Into<String>) -> Self {
        Piece {
            text: text.into(),
            continuation: false,
        }
    }

    pub fn continuation(text: impl Into<String>) -> Self {
        Piece {
            text: text.into(),
            continuation: true,
        }
    }

    /// Surface form: continuation pieces carry the `##` marker.
    pub fn surface(&self) -> String {
        if self.continuation {
            format!("{CONTINUATION}{}", self.text)
        } else {
            self.text.clone()
        }
    }

    // File form: like `surface`, but word-initial pieces that would read as
    // continuations (or as escapes) get a leading backslash.
    fn escaped(&self) -> String {
        if !self.continuation
            && (self.text.starts_with(CONTINUATION) || self.text.starts_with('\\'))
        {
            format!("\\{}", self.text)
        } else {
            self.surface()
        }
    }

    fn unescape(s: &str) -> Piece {
        if let Some(rest) = s.strip_prefix('\\') {
            Piece::initial(rest)
        } else if let Some(rest) = s.strip_prefix(CONTINUATION) {
            Piece::continuation(rest)
        } else {
            Piece::initial(s)
        }
    }
}

/// Trained subword inventory.
///
/// Ids `0..5` are the specials in [`SPECIALS`] order; every other id maps to
/// a [`Piece`]. Both the word-initial and the continuation form of every
/// character seen during training are present, so segmentation of text made
/// of seen characters never needs the unknown token.
#[derive(Clone, Debug, PartialEq)]
pub struct SubwordVocab {
    pieces: Vec<Piece>,
    index: HashMap<Piece, u32>,
    merges: Vec<(Piece, Piece)>,
    lowercase: bool,
    max_piece_chars: usize,
}

impl SubwordVocab {
    fn from_parts(
        pieces: Vec<Piece>,
        merges: Vec<(Piece, Piece)>,
        lowercase: bool,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate().skip(SPECIALS.len()) {
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::format(
                    "token",
                    format!("duplicate vocabulary entry {:?} at id {i}", p.surface()),
                ));
            }
        }
        let max_piece_chars = pieces
            .iter()
            .map(|p| p.text.chars().count())
            .max()
            .unwrap_or(1);
        Ok(SubwordVocab {
            pieces,
            index,
            merges,
            lowercase,
            max_piece_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn merges(&self) -> &[(Piece, Piece)] {
        &self.merges
    }

    pub fn id(&self, piece: &Piece) -> Option<u32> {
        self.index.get(piece).copied()
    }

    /// Entry for `id`; specials come back as initial pieces named like `[CLS]`.
    pub fn piece(&self, id: u32) -> Option<&Piece> {
        self.pieces.get(id as usize)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Surface string of `id` (`##` marks continuations).
    pub fn token(&self, id: u32) -> Option<String> {
        self.piece(id).map(Piece::surface)
    }

    pub(crate) fn max_piece_chars(&self) -> usize {
        self.max_piece_chars
    }

    /// Apply the vocabulary's normalization (cleaning plus optional lowercasing).
    pub fn normalize(&self, text: &str) -> String {
        let cleaned = text::clean(text);
        if self.lowercase {
            cleaned.to_lowercase()
        } else {
            cleaned
        }
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FILE_MAGIC}");
        let _ = writeln!(out, "#specials {}", SPECIALS.join(" "));
        let _ = writeln!(out, "#continuation {CONTINUATION}");
        let _ = writeln!(
            out,
            "#normalization nfc strip-control collapse-whitespace lowercase={}",
            self.lowercase
        );
        let _ = writeln!(out, "#merges {}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(out, "#merge {} {}", l.escaped(), r.escaped());
        }
        for (i, p) in self.pieces.iter().enumerate() {
            if i < SPECIALS.len() {
                let _ = writeln!(out, "{}", SPECIALS[i]);
            } else {
                let _ = writeln!(out, "{}", p.escaped());
            }
        }
        out
    }

    pub fn from_file_str(s: &str) -> Result<Self> {
        let mut lines = s.lines().peekable();
        if lines.next() != Some(FILE_MAGIC) {
            return Err(Error::format("header", format!("expected `{FILE_MAGIC}`")));
        }
        let mut lowercase = None;
        let mut merge_count = None;
        let mut merges = Vec::new();
        while let Some(line) = lines.next_if(|l| l.starts_with('#')) {
            let (key, value) = line[1..].split_once(' ').unwrap_or((&line[1..], ""));
            match key {
                "specials" => {
                    if value.split(' ').ne(SPECIALS) {
                        return Err(Error::format("specials", format!("unexpected `{value}`")));
                    }
                }
                "continuation" => {
                    if value != CONTINUATION {
                        return Err(Error::format(
                            "continuation",
                            format!("unsupported marker `{value}`"),
                        ));
                    }
                }
                "normalization" => {
                    let flag = value
                        .split(' ')
                        .find_map(|f| f.strip_prefix("lowercase="))
                        .ok_or_else(|| Error::format("normalization", "missing lowercase flag"))?;
                    lowercase = Some(flag.parse::<bool>().map_err(|_| {
                        Error::format("normalization", format!("bad lowercase flag `{flag}`"))
                    })?);
                }
                "merges" => {
                    merge_count = Some(value.parse::<usize>().map_err(|_| {
                        Error::format("merges", format!("bad merge count `{value}`"))
                    })?);
                }
                "merge" => {
                    let (l, r) = value
                        .split_once(' ')
                        .ok_or_else(|| Error::format("merge", format!("malformed `{value}`")))?;
                    merges.push((Piece::unescape(l), Piece::unescape(r)));
                }
                other => {
                    return Err(Error::format(
                        "header",
                        format!("unknown header key `{other}`"),
                    ));
                }
            }
        }
        let lowercase = lowercase.ok_or_else(|| Error::format("normalization", "missing"))?;
        match merge_count {
            Some(n) if n == merges.len() => {}
            Some(n) => {
                return Err(Error::format(
                    "merges",
                    format!("header declares {n} merges, found {}", merges.len()),
                ))
            }
            None => return Err(Error::format("merges", "missing")),
        }
        let mut pieces = Vec::new();
        for (i, line) in lines.enumerate() {
            if i < SPECIALS.len() {
                if line != SPECIALS[i] {
                    return Err(Error::format(
                        "token",
                        format!("id {i} must be {}, found `{line}`", SPECIALS[i]),
                    ));
                }
                pieces.push(Piece::initial(line));
            } else {
                if line.is_empty() {
                    return Err(Error::format("token", format!("empty token at id {i}")));
                }
                pieces.push(Piece::unescape(line));
            }
        }
        if pieces.len() < SPECIALS.len() {
            return Err(Error::format("token", "vocabulary lacks special tokens"));
        }
        Self::from_parts(pieces, merges, lowercase)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_str(&s)
    }
}

/// Train a byte-pair vocabulary over whitespace-split words.
///
/// Words start as sequences of single characters, the first word-initial and
/// the rest continuation pieces. The most frequent adjacent pair is merged
/// repeatedly, ties broken by the lexicographically smallest
/// `(left, right)` surface pair, until `target_size` entries exist or no pair
/// occurs at least twice.
pub fn train_vocab<I, S>(texts: I, target_size: usize, lowercase: bool) -> Result<SubwordVocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for t in texts {
        let mut cleaned = text::clean(t.as_ref());
        if lowercase {
            cleaned = cleaned.to_lowercase();
        }
        for w in text::words(&cleaned) {
            *word_counts.entry(w.to_string()).or_default() += 1;
        }
    }

    let chars: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    let alphabet = 2 * chars.len();
    if target_size <= alphabet + SPECIALS.len() {
        return Err(Error::config(format!(
            "target vocabulary size {target_size} must exceed {} ({} atomic units + {} specials)",
            alphabet + SPECIALS.len(),
            alphabet,
            SPECIALS.len()
        )));
    }

    let mut pieces: Vec<Piece> = SPECIALS.iter().map(|s| Piece::initial(*s)).collect();
    for c in &chars {
        pieces.push(Piece::initial(c.to_string()));
    }
    for c in &chars {
        pieces.push(Piece::continuation(c.to_string()));
    }
    let mut ids: HashMap<Piece, u32> = pieces
        .iter()
        .enumerate()
        .skip(SPECIALS.len())
        .map(|(i, p)| (p.clone(), i as u32))
        .collect();

    // Working symbols (vocabulary ids) per distinct word.
    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .iter()
        .map(|(w, &n)| {
            let syms = w
                .chars()
                .enumerate()
                .map(|(i, c)| {
                    let p = if i == 0 {
                        Piece::initial(c.to_string())
                    } else {
                        Piece::continuation(c.to_string())
                    };
                    ids[&p]
                })
                .collect();
            (syms, n)
        })
        .collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (syms, n)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            let key = (p[0], p[1]);
            *pair_counts.entry(key).or_default() += *n as i64;
            pair_words.entry(key).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    let mut surfaces: Vec<String> = pieces.iter().map(Piece::surface).collect();
    while pieces.len() < target_size {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(ka, ca), (kb, cb)| {
                ca.cmp(cb).then_with(|| {
                    // smaller surface pair wins the tie, so reverse the order
                    let a = (&surfaces[ka.0 as usize], &surfaces[ka.1 as usize]);
                    let b = (&surfaces[kb.0 as usize], &surfaces[kb.1 as usize]);
                    b.cmp(&a)
                })
            })
            .map(|(k, _)| *k);
        let Some((left, right)) = best else { break };

        let merged = Piece {
            text: format!(
                "{}{}",
                pieces[left as usize].text, pieces[right as usize].text
            ),
            continuation: pieces[left as usize].continuation,
        };
        let new_id = match ids.get(&merged) {
            Some(&id) => id,
            None => {
                let id = pieces.len() as u32;
                surfaces.push(merged.surface());
                ids.insert(merged.clone(), id);
                pieces.push(merged);
                id
            }
        };
        merges.push((
            pieces[left as usize].clone(),
            pieces[right as usize].clone(),
        ));

        let affected: Vec<usize> = pair_words
            .remove(&(left, right))
            .map(|s| {
                let mut v: Vec<usize> = s.into_iter().collect();
                v.sort_unstable();
                v
            })
            .unwrap_or_default();
        for wi in affected {
            let (syms, n) = &mut words[wi];
            let n = *n as i64;
            for p in syms.windows(2) {
                let key = (p[0], p[1]);
                if let Some(c) = pair_counts.get_mut(&key) {
                    *c -= n;
                    if *c <= 0 {
                        pair_counts.remove(&key);
                    }
                }
                if let Some(set) = pair_words.get_mut(&key) {
                    set.remove(&wi);
                }
            }
            let mut merged_syms = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
                    merged_syms.push(new_id);
                    i += 2;
                } else {
                    merged_syms.push(syms[i]);
                    i += 1;
                }
            }
            *syms = merged_syms;
            for p in syms.windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.entry(key).or_default() += n;
                pair_words.entry(key).or_default().insert(wi);
            }
        }
        pair_counts.remove(&(left, right));
    }

    SubwordVocab::from_parts(pieces, merges, lowercase)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_merge_joins_ab() {
        let v = train_vocab(["ab ab ab"], 50, false).unwrap();
        assert_eq!(
            v.merges()[0],
            (Piece::initial("a"), Piece::continuation("b"))
        );
        assert!(v.id(&Piece::initial("ab")).is_some());
    }

    #[test]
    fn too_small_target_is_config_error() {
        let err = train_vocab(["abcdefghij"], 3, false).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn tie_break_prefers_smaller_pair() {
        // "ba" and "ab" both occur twice; ("a","##b") < ("b","##a")
        let v = train_vocab(["ab ba ab ba"], 50, false).unwrap();
        assert_eq!(
            v.merges()[0],
            (Piece::initial("a"), Piece::continuation("b"))
        );
        assert_eq!(
            v.merges()[1],
            (Piece::initial("b"), Piece::continuation("a"))
        );
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let v = train_vocab(["abc"], 1000, false).unwrap();
        assert!(v.merges().is_empty());
        // specials + {a,b,c} in both forms
        assert_eq!(v.len(), 5 + 6);
    }

    #[test]
    fn specials_fixed_and_never_merged() {
        let v = train_vocab(["[CLS] [CLS] [CLS] x"], 100, false).unwrap();
        assert_eq!(v.token(2).unwrap(), "[CLS]");
        // the literal text "[CLS]" becomes an ordinary piece with a different id
        let literal = v.id(&Piece::initial("[CLS]")).unwrap();
        assert!(literal >= 5);
    }

    #[test]
    fn file_roundtrip_with_awkward_pieces() {
        let v = train_vocab(["##x ##x \\y \\y normal normal"], 200, false).unwrap();
        let back = SubwordVocab::from_file_str(&v.to_file_string()).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn merge_count_mismatch_rejected() {
        let v = train_vocab(["ab ab"], 50, false).unwrap();
        let s = v.to_file_string().replace("#merges 1", "#merges 2");
        assert!(matches!(
            SubwordVocab::from_file_str(&s),
            Err(Error::Format { .. })
        ));
    }
}
