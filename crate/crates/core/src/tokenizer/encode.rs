use crate::error::{Error, Result};
use crate::text;

use super::vocab::Piece;
use super::{SubwordVocab, CLS_ID, IGNORE_LABEL, PAD_ID, SEP_ID, UNK_ID};

/// Token ids for one model input plus alignment metadata.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    /// Positions `0..valid_len` are real tokens; the rest is padding.
    pub valid_len: usize,
    pub segments: Vec<u8>,
    /// True at the first subtoken of each source word that survived truncation.
    pub word_starts: Vec<bool>,
    /// Number of source words before truncation.
    pub word_count: usize,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Extend with padding up to `len` positions (no-op when already longer).
    pub fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD_ID);
            self.segments.push(0);
            self.word_starts.push(false);
        }
    }

    /// Positions holding the first subtoken of each surviving word, in word order.
    pub fn word_start_positions(&self) -> Vec<usize> {
        self.word_starts
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }
}

/// Per-word subtoken ids.
type Segmented = Vec<Vec<u32>>;

/// A vocabulary paired with a maximum sequence length.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: SubwordVocab,
    max_len: usize,
}

impl Tokenizer {
    pub fn new(vocab: SubwordVocab, max_len: usize) -> Result<Self> {
        if max_len < 3 {
            return Err(Error::config(format!(
                "max sequence length {max_len} leaves no room for CLS/SEP framing"
            )));
        }
        Ok(Tokenizer { vocab, max_len })
    }

    pub fn vocab(&self) -> &SubwordVocab {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Greedy longest-match segmentation of a single pre-split word.
    /// A word containing an unmatched character becomes one `[UNK]`.
    fn segment_word(&self, word: &str) -> Vec<u32> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return vec![UNK_ID];
        }
        let longest = self.vocab.max_piece_chars();
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            let mut end = chars.len().min(start + longest);
            while end > start {
                let s: String = chars[start..end].iter().collect();
                let piece = Piece {
                    text: s,
                    continuation: start > 0,
                };
                if let Some(id) = self.vocab.id(&piece) {
                    found = Some((id, end));
                    break;
                }
                end -= 1;
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => return vec![UNK_ID],
            }
        }
        out
    }

    fn segment_words<S: AsRef<str>>(&self, words: &[S]) -> Segmented {
        words
            .iter()
            .map(|w| {
                let norm = self.vocab.normalize(w.as_ref());
                // a pre-split word that normalizes to several words stays one word
                let joined: String = text::words(&norm).collect();
                self.segment_word(&joined)
            })
            .collect()
    }

    fn segment_text(&self, text: &str) -> Segmented {
        let norm = self.vocab.normalize(text);
        text::words(&norm).map(|w| self.segment_word(w)).collect()
    }

    /// Subtoken ids of `text` without framing or truncation.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.segment_text(text).concat()
    }

    /// `[CLS] text [SEP]`, truncated to the maximum length.
    pub fn encode(&self, text: &str) -> Encoding {
        let words = self.segment_text(text);
        self.frame_single(&words)
    }

    /// Like [`encode`](Self::encode) for text that is already split into
    /// words; the word count is preserved exactly.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Encoding {
        let words = self.segment_words(words);
        self.frame_single(&words)
    }

    fn frame_single(&self, words: &Segmented) -> Encoding {
        let budget = self.max_len - 2;
        let mut ids = vec![CLS_ID];
        let mut starts = vec![false];
        'outer: for w in words {
            for (j, &id) in w.iter().enumerate() {
                if ids.len() - 1 == budget {
                    break 'outer;
                }
                ids.push(id);
                starts.push(j == 0);
            }
        }
        ids.push(SEP_ID);
        starts.push(false);
        let n = ids.len();
        Encoding {
            ids,
            valid_len: n,
            segments: vec![0; n],
            word_starts: starts,
            word_count: words.len(),
        }
    }

    /// `[CLS] a [SEP] b [SEP]` with segment ids 0 then 1. When over length,
    /// tokens are removed from the end of the longer segment first.
    pub fn encode_pair(&self, a: &str, b: &str) -> Encoding {
        let wa = self.segment_text(a);
        let wb = self.segment_text(b);
        if wb.is_empty() {
            return self.frame_single(&wa);
        }
        let flat = |ws: &Segmented| -> Vec<(u32, bool)> {
            ws.iter()
                .flat_map(|w| w.iter().enumerate().map(|(j, &id)| (id, j == 0)))
                .collect()
        };
        let (mut ta, mut tb) = (flat(&wa), flat(&wb));
        let budget = self.max_len - 3;
        while ta.len() + tb.len() > budget {
            if ta.len() > tb.len() {
                ta.pop();
            } else {
                tb.pop();
            }
        }
        let mut ids = vec![CLS_ID];
        let mut starts = vec![false];
        for &(id, s) in &ta {
            ids.push(id);
            starts.push(s);
        }
        ids.push(SEP_ID);
        starts.push(false);
        let first = ids.len();
        for &(id, s) in &tb {
            ids.push(id);
            starts.push(s);
        }
        ids.push(SEP_ID);
        starts.push(false);
        let n = ids.len();
        let mut segments = vec![0u8; first];
        segments.resize(n, 1);
        Encoding {
            ids,
            valid_len: n,
            segments,
            word_starts: starts,
            word_count: wa.len() + wb.len(),
        }
    }

    /// Inverse of encoding for in-vocabulary text: specials are dropped,
    /// continuation pieces glue onto the previous piece, words are joined
    /// by single spaces.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for (pos, &id) in ids.iter().enumerate() {
            let piece = self.vocab.piece(id).ok_or_else(|| {
                Error::index(format!(
                    "token id {id} at position {pos} outside vocabulary of {}",
                    self.vocab.len()
                ))
            })?;
            if SubwordVocab::is_special(id) {
                continue;
            }
            if !piece.continuation && !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&piece.text);
        }
        Ok(out)
    }
}

/// Spread word-level labels onto subtokens: each word's first subtoken gets
/// its label, everything else gets [`IGNORE_LABEL`]. Labels of words lost to
/// truncation are dropped.
pub fn align_word_labels(encoding: &Encoding, word_labels: &[i64]) -> Result<Vec<i64>> {
    if word_labels.len() != encoding.word_count {
        return Err(Error::data(format!(
            "{} word labels for an encoding of {} words",
            word_labels.len(),
            encoding.word_count
        )));
    }
    let mut out = vec![IGNORE_LABEL; encoding.len()];
    for (label, pos) in word_labels.iter().zip(encoding.word_start_positions()) {
        out[pos] = *label;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{train_vocab, Piece, MASK_ID};

    fn tok(corpus: &[&str], size: usize, max_len: usize) -> Tokenizer {
        Tokenizer::new(
            train_vocab(corpus.iter().copied(), size, false).unwrap(),
            max_len,
        )
        .unwrap()
    }

    #[test]
    fn single_piece_word() {
        let t = tok(&["cough cough cough"], 100, 16);
        let id = t.vocab().id(&Piece::initial("cough")).unwrap();
        assert_eq!(t.encode("cough").ids, vec![CLS_ID, id, SEP_ID]);
    }

    #[test]
    fn empty_string() {
        let t = tok(&["ab"], 50, 16);
        let e = t.encode("");
        assert_eq!(e.ids, vec![CLS_ID, SEP_ID]);
        assert_eq!(e.word_count, 0);
    }

    #[test]
    fn unknown_character_becomes_unk_word() {
        let t = tok(&["ab ab"], 50, 16);
        let e = t.encode("ab aqb");
        assert_eq!(e.ids[2], UNK_ID);
        assert_eq!(e.ids.len(), 4);
    }

    #[test]
    fn pair_layout() {
        let t = tok(&["x y"], 50, 16);
        let (x, y) = (
            t.vocab().id(&Piece::initial("x")).unwrap(),
            t.vocab().id(&Piece::initial("y")).unwrap(),
        );
        let e = t.encode_pair("x", "y");
        assert_eq!(e.ids, vec![CLS_ID, x, SEP_ID, y, SEP_ID]);
        assert_eq!(e.segments, vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn pair_with_empty_second_is_single() {
        let t = tok(&["x y"], 50, 16);
        assert_eq!(t.encode_pair("x y", ""), t.encode("x y"));
    }

    #[test]
    fn overlong_pair_hits_max_len_and_trims_longer_first() {
        let t = tok(&["a b c d e f g h"], 50, 8);
        let e = t.encode_pair("a b c d e f g", "h");
        assert_eq!(e.ids.len(), 8);
        // b kept its single token, a was trimmed
        assert_eq!(e.segments.iter().filter(|&&s| s == 1).count(), 2);
        assert_eq!(*e.ids.last().unwrap(), SEP_ID);
    }

    #[test]
    fn truncation_preserves_sep() {
        let t = tok(&["a b c d e f"], 50, 5);
        let e = t.encode("a b c d e f");
        assert_eq!(e.ids.len(), 5);
        assert_eq!(e.ids[4], SEP_ID);
        assert_eq!(e.word_count, 6);
    }

    #[test]
    fn decode_rules() {
        let t = tok(&["unable unable able"], 200, 16);
        assert_eq!(t.decode(&[CLS_ID, SEP_ID]).unwrap(), "");
        let e = t.encode("unable able");
        assert_eq!(t.decode(&e.ids).unwrap(), "unable able");
        assert!(matches!(t.decode(&[9999]), Err(Error::Index(_))));
        assert_eq!(t.decode(&[MASK_ID]).unwrap(), "");
    }

    #[test]
    fn continuation_joins_previous_piece() {
        let t = tok(&["un able"], 50, 16);
        let v = t.vocab();
        let u = v.id(&Piece::initial("u")).unwrap();
        let n = v.id(&Piece::continuation("n")).unwrap();
        let a = v.id(&Piece::continuation("a")).unwrap();
        let b = v.id(&Piece::continuation("b")).unwrap();
        let l = v.id(&Piece::continuation("l")).unwrap();
        let e = v.id(&Piece::continuation("e")).unwrap();
        assert_eq!(t.decode(&[u, n, a, b, l, e]).unwrap(), "unable");
    }

    #[test]
    fn word_starts_mark_one_subtoken_per_word() {
        let t = tok(&["alpha beta gamma"], 30, 64);
        let e = t.encode("alpha beta gamma alpha");
        assert_eq!(e.word_starts.iter().filter(|&&s| s).count(), 4);
    }

    #[test]
    fn align_labels_examples() {
        let t = tok(&["ab"], 15, 16); // "ab" splits into two pieces
        let e = t.encode("ab");
        assert_eq!(e.ids.len(), 4);
        assert_eq!(
            align_word_labels(&e, &[7]).unwrap(),
            vec![IGNORE_LABEL, 7, IGNORE_LABEL, IGNORE_LABEL]
        );

        let t = tok(&["x y z"], 50, 16);
        let e = t.encode("x y z");
        assert_eq!(
            align_word_labels(&e, &[1, 2, 3]).unwrap(),
            vec![IGNORE_LABEL, 1, 2, 3, IGNORE_LABEL]
        );

        let e = t.encode("");
        assert_eq!(align_word_labels(&e, &[]).unwrap(), vec![IGNORE_LABEL; 2]);

        assert!(matches!(align_word_labels(&e, &[1]), Err(Error::Data(_))));
    }

    #[test]
    fn encode_words_keeps_count() {
        let t = tok(&["a b"], 50, 16);
        let e = t.encode_words(&["a", "", "b c"]);
        assert_eq!(e.word_count, 3);
        assert_eq!(e.word_start_positions().len(), 3);
    }
}
