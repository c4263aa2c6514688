use rand::Rng;

use crate::error::{Error, Result};
use crate::text::vocab::{TokenSequence, N_SPECIALS};

/// BERT-style corruption rule. `p_mask`/`p_random`/`p_keep` split the chosen
/// positions; they must sum to 1. `min_one` keeps the masked-position loss
/// defined on short sequences by forcing at least one selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPolicy {
    pub mask_rate: f64,
    pub p_mask: f64,
    pub p_random: f64,
    pub p_keep: f64,
    pub min_one: bool,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy { mask_rate: 0.15, p_mask: 0.8, p_random: 0.1, p_keep: 0.1, min_one: true }
    }
}

impl MaskPolicy {
    /// All positions selected by the rate become MASK outright.
    pub fn pure_mask(mask_rate: f64) -> Self {
        MaskPolicy { mask_rate, p_mask: 1.0, p_random: 0.0, p_keep: 0.0, min_one: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::config("mask_rate", "must lie in [0, 1]"));
        }
        for (name, p) in
            [("p_mask", self.p_mask), ("p_random", self.p_random), ("p_keep", self.p_keep)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        let total = self.p_mask + self.p_random + self.p_keep;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("p_mask+p_random+p_keep", "must sum to 1"));
        }
        Ok(())
    }
}

/// Original and corrupted views of a batch, plus the selected positions and
/// the generator's reconstruction targets at those positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub original: Vec<TokenSequence>,
    pub corrupted: Vec<TokenSequence>,
    pub masked: Vec<Vec<usize>>,
    pub mlm_targets: Vec<Vec<usize>>,
}

const MASK_ID: usize = crate::text::vocab::MASK;

/// Selects round(rate * non_special) positions per sequence uniformly without
/// replacement, then applies the corruption rule to each. Special positions
/// are never candidates and the random-replacement pool starts past the
/// special block.
pub fn mask_tokens(
    batch: &[TokenSequence],
    policy: &MaskPolicy,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<MaskedBatch> {
    policy.validate()?;
    if vocab_size <= N_SPECIALS {
        return Err(Error::Vocab("no non-special tokens to draw replacements from".into()));
    }
    let mut corrupted = Vec::with_capacity(batch.len());
    let mut masked = Vec::with_capacity(batch.len());
    let mut mlm_targets = Vec::with_capacity(batch.len());

    for (si, seq) in batch.iter().enumerate() {
        let mut candidates: Vec<usize> =
            (0..seq.ids.len()).filter(|&i| seq.ids[i] >= N_SPECIALS).collect();
        let mut k = (policy.mask_rate * candidates.len() as f64).round() as usize;
        if policy.min_one {
            if candidates.is_empty() {
                return Err(Error::Corpus(format!(
                    "sequence {si} has no maskable positions"
                )));
            }
            k = k.max(1);
        }
        k = k.min(candidates.len());

        // Partial Fisher-Yates: the first k slots end up a uniform sample
        // without replacement.
        for i in 0..k {
            let j = rng.gen_range(i..candidates.len());
            candidates.swap(i, j);
        }
        let mut chosen: Vec<usize> = candidates[..k].to_vec();
        chosen.sort_unstable();

        let mut ids = seq.ids.clone();
        let mut targets = Vec::with_capacity(k);
        for &pos in &chosen {
            targets.push(seq.ids[pos]);
            let u: f64 = rng.gen();
            if u < policy.p_mask {
                ids[pos] = MASK_ID;
            } else if u < policy.p_mask + policy.p_random {
                ids[pos] = rng.gen_range(N_SPECIALS..vocab_size);
            }
        }
        corrupted.push(TokenSequence { ids });
        masked.push(chosen);
        mlm_targets.push(targets);
    }

    Ok(MaskedBatch { original: batch.to_vec(), corrupted, masked, mlm_targets })
}
