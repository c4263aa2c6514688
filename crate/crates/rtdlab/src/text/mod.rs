//! Synthetic corpus, word-piece vocabulary, masking, and batching.
//!
//! Everything here is a pure function of its inputs and an explicit seed or
//! RNG stream, so batch construction can run ahead of training on another
//! thread as long as batches are consumed in seed order.

mod batch;
mod corpus;
mod mask;
mod vocab;

pub use batch::{pad_batch, sample_batch, PaddedBatch};
pub use corpus::{corpus_synth, synth_docs, SynthDoc, N_TOPICS, TOPIC_NAMES};
pub use mask::{mask_tokens, MaskPolicy, MaskedBatch};
pub use vocab::{
    build_vocab, encode_sequence, TokenSequence, Vocab, CLS, MASK, N_SPECIALS, PAD, SEP, UNK,
};
