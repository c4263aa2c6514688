use rand::Rng;

use crate::text::vocab::{TokenSequence, PAD};

/// Rectangular id block padded to the longest sequence in the batch.
/// `real[b * s + i]` is false exactly at PAD fill.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub b: usize,
    pub s: usize,
    pub ids: Vec<usize>,
    pub real: Vec<bool>,
}

pub fn pad_batch(seqs: &[TokenSequence]) -> PaddedBatch {
    let b = seqs.len();
    let s = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
    let mut ids = vec![PAD; b * s];
    let mut real = vec![false; b * s];
    for (bi, seq) in seqs.iter().enumerate() {
        for (i, &id) in seq.ids.iter().enumerate() {
            ids[bi * s + i] = id;
            real[bi * s + i] = true;
        }
    }
    PaddedBatch { b, s, ids, real }
}

/// Uniform with-replacement draw of `batch_size` documents.
pub fn sample_batch(
    docs: &[TokenSequence],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Vec<TokenSequence> {
    (0..batch_size).map(|_| docs[rng.gen_range(0..docs.len())].clone()).collect()
}
