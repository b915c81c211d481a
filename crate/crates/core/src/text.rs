//! Text cleaning shared by the corpus pipeline and the tokenizer.

use unicode_normalization::UnicodeNormalization;

/// Normalize text for corpus statistics and tokenization.
///
/// Whitespace characters become spaces, other control characters are
/// dropped, runs of spaces collapse to one, the ends are trimmed, and the
/// result is NFC-normalized. Composition runs last so that removing a
/// control character between a base and a combining mark cannot leave a
/// non-NFC string behind; the function is idempotent.
pub fn clean(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else if c.is_control() {
            continue;
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
    }
    if out.is_ascii() {
        return out;
    }
    let composed: String = out.nfc().collect();
    if composed == out {
        out
    } else {
        // Composition can map onto characters the first pass rewrites
        // (singleton decompositions of spacing characters); iterate to a
        // fixed point.
        clean(&composed)
    }
}

/// Split cleaned text into whitespace-delimited words.
pub fn words(cleaned: &str) -> impl Iterator<Item = &str> {
    cleaned.split(' ').filter(|w| !w.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tabs_collapse_to_one_space() {
        assert_eq!(clean("a\u{0009}\u{0009}b"), "a b");
    }

    #[test]
    fn clean_text_unchanged() {
        assert_eq!(clean("already clean text"), "already clean text");
        assert_eq!(
            clean("Пациент жалуется на кашель"),
            "Пациент жалуется на кашель"
        );
    }

    #[test]
    fn strips_controls_and_trims() {
        assert_eq!(clean("  \u{0001}x\u{0007}y \n z  "), "xy z");
        assert_eq!(clean(""), "");
        assert_eq!(clean(" \t\n "), "");
    }

    #[test]
    fn composes_to_nfc() {
        assert_eq!(clean("e\u{0301}"), "\u{00e9}");
        // control between base and combining mark
        assert_eq!(clean("e\u{0001}\u{0301}"), "\u{00e9}");
    }

    proptest! {
        #[test]
        fn idempotent(s in "\\PC*|[\\x00-\\x20e\u{0301}\u{0308}й\u{2000}]*") {
            let once = clean(&s);
            prop_assert_eq!(clean(&once), once);
        }

        #[test]
        fn idempotent_any_chars(v in proptest::collection::vec(any::<char>(), 0..40)) {
            let s: String = v.into_iter().collect();
            let once = clean(&s);
            prop_assert_eq!(clean(&once), once);
        }
    }
}
