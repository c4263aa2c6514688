use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::encoder::attention::{attention_forward, default_scale};
use crate::encoder::config::EncoderConfig;
use crate::encoder::params::{BodyParams, EncoderParams, LN_EPS};
use crate::error::{Error, Result};
use crate::real::Real;

/// Row-gather of token embeddings: ids laid out (B, S) flat, output (B, S, H).
pub fn embed<F: Real>(
    tape: &Tape<F>,
    table: &Tensor<F>,
    ids: &[usize],
    b: usize,
    s: usize,
) -> Result<Tensor<F>> {
    if ids.len() != b * s {
        return Err(Error::ShapeMismatch {
            op: "embed",
            detail: format!("{} ids vs batch {b} x {s}", ids.len()),
        });
    }
    let hidden = table.shape()[1];
    let rows = tape.gather_rows(table, ids)?;
    tape.reshape(&rows, &[b, s, hidden])
}

/// Token embeddings plus the learned absolute-position rows for 0..S.
pub fn embed_with_positions<F: Real>(
    tape: &Tape<F>,
    table: &Tensor<F>,
    body: &BodyParams<F>,
    ids: &[usize],
    b: usize,
    s: usize,
) -> Result<Tensor<F>> {
    if s > body.max_seq_len() {
        return Err(Error::ShapeMismatch {
            op: "embed",
            detail: format!("sequence length {s} exceeds position table {}", body.max_seq_len()),
        });
    }
    let tok = embed(tape, table, ids, b, s)?;
    let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
    let hidden = table.shape()[1];
    let pos = tape.reshape(&tape.gather_rows(&body.abs_pos, &pos_ids)?, &[b, s, hidden])?;
    tape.add(&tok, &pos)
}

/// Pre-layer-norm residual stack. No trailing norm: zero layers pass the
/// embeddings through untouched.
pub fn encoder_forward<F: Real, R: Rng>(
    tape: &Tape<F>,
    x: &Tensor<F>,
    params: &EncoderParams<F>,
    cfg: &EncoderConfig,
    mask_bias: Option<&Tensor<F>>,
    rng: &mut R,
) -> Result<Tensor<F>> {
    let scale = default_scale(cfg);
    let mut h = x.clone();
    for layer in &params.layers {
        let normed = tape.layer_norm(&h, &layer.ln1_g, &layer.ln1_b, LN_EPS)?;
        let attn = attention_forward(
            tape,
            &normed,
            layer,
            params.rel_pos.as_ref(),
            cfg,
            mask_bias,
            scale,
            rng,
        )?;
        let attn = tape.dropout(&attn, cfg.dropout, rng)?;
        h = tape.add(&h, &attn)?;

        let normed = tape.layer_norm(&h, &layer.ln2_g, &layer.ln2_b, LN_EPS)?;
        let inner = tape.gelu(&tape.add(&tape.matmul(&normed, &layer.w1)?, &layer.b1)?)?;
        let ffn = tape.add(&tape.matmul(&inner, &layer.w2)?, &layer.b2)?;
        let ffn = tape.dropout(&ffn, cfg.dropout, rng)?;
        h = tape.add(&h, &ffn)?;
    }
    Ok(h)
}
