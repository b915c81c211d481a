//! Subword vocabulary training, encoding, and masked-LM corruption.

mod encode;
mod masking;
mod vocab;

pub use encode::{align_word_labels, Encoding, Tokenizer};
pub use masking::{mask_for_mlm, MaskAction, MaskingConfig, MaskingOutcome};
pub use vocab::{train_vocab, Piece, SubwordVocab};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

/// Special tokens, in id order.
pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Prefix marking word-internal pieces.
pub const CONTINUATION: &str = "##";

/// Label value for positions that carry no training target.
pub const IGNORE_LABEL: i64 = -100;
