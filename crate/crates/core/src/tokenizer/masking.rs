use rand::Rng;

use crate::error::{Error, Result};

use super::{Encoding, SubwordVocab, IGNORE_LABEL, MASK_ID, SPECIALS};

/// What happened to one position during corruption.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    Untouched,
    Mask,
    Random,
    Keep,
}

/// Selection probability and the split of selected positions between
/// `[MASK]`, a random token, and the unchanged token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingConfig {
    pub select_p: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            select_p: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.mask_frac, self.random_frac, self.keep_frac];
        if !(0.0..=1.0).contains(&self.select_p) || fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config(format!(
                "masking probabilities out of [0, 1]: {self:?}"
            )));
        }
        let total: f64 = fracs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "mask/random/keep fractions sum to {total}, not 1"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskingOutcome {
    pub ids: Vec<u32>,
    /// Original id at selected positions, [`IGNORE_LABEL`] elsewhere.
    pub labels: Vec<i64>,
    pub actions: Vec<MaskAction>,
}

impl MaskingOutcome {
    pub fn selected(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }
}

/// Corrupt an encoding for masked-LM training.
///
/// Each real (non-special, non-padding) position is selected independently
/// with `select_p`; a selected position becomes `[MASK]`, a uniformly drawn
/// non-special id, or stays as is, in the configured proportions.
pub fn mask_for_mlm<R: Rng + ?Sized>(
    encoding: &Encoding,
    rng: &mut R,
    config: &MaskingConfig,
    vocab_size: usize,
) -> Result<MaskingOutcome> {
    config.validate()?;
    let first_regular = SPECIALS.len() as u32;
    if vocab_size as u32 <= first_regular {
        return Err(Error::config("vocabulary has no regular tokens to sample"));
    }
    let n = encoding.len();
    let mut ids = encoding.ids.clone();
    let mut labels = vec![IGNORE_LABEL; n];
    let mut actions = vec![MaskAction::Untouched; n];
    for pos in 0..encoding.valid_len.min(n) {
        let original = ids[pos];
        if SubwordVocab::is_special(original) {
            continue;
        }
        if rng.random::<f64>() >= config.select_p {
            continue;
        }
        labels[pos] = original as i64;
        let u = rng.random::<f64>();
        if u < config.mask_frac {
            ids[pos] = MASK_ID;
            actions[pos] = MaskAction::Mask;
        } else if u < config.mask_frac + config.random_frac {
            ids[pos] = rng.random_range(first_regular..vocab_size as u32);
            actions[pos] = MaskAction::Random;
        } else {
            actions[pos] = MaskAction::Keep;
        }
    }
    Ok(MaskingOutcome {
        ids,
        labels,
        actions,
    })
}
