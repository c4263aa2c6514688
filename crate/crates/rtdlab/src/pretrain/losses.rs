use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::text::{MaskedBatch, TokenSequence};

/// Mean negative log-likelihood of the original tokens at the masked
/// positions. `gen_logits` is (B, S, V) over the padded batch; the masked
/// index sets address positions within each unpadded sequence.
pub fn mlm_loss<F: Real>(
    tape: &Tape<F>,
    gen_logits: &Tensor<F>,
    batch: &MaskedBatch,
) -> Result<Tensor<F>> {
    let shape = gen_logits.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "mlm_loss",
            detail: format!("logits must be (B, S, V), got {shape:?}"),
        });
    }
    let (b, s, v) = (shape[0], shape[1], shape[2]);
    if b != batch.original.len() {
        return Err(Error::ShapeMismatch {
            op: "mlm_loss",
            detail: format!("{b} logit rows vs {} sequences", batch.original.len()),
        });
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (bi, positions) in batch.masked.iter().enumerate() {
        for (ci, &pos) in positions.iter().enumerate() {
            rows.push(bi * s + pos);
            targets.push(batch.mlm_targets[bi][ci]);
        }
    }
    if rows.is_empty() {
        return Err(Error::Corpus("batch has no masked positions".into()));
    }
    let flat = tape.reshape(gen_logits, &[b * s, v])?;
    let picked = tape.gather_rows(&flat, &rows)?;
    tape.cross_entropy(&picked, &targets)
}

/// Draws the discriminator's input: for each masked position, a token sampled
/// from softmax(logits / temperature); everywhere else, the original token.
///
/// This reads logit values only and records nothing on any tape, so no
/// gradient can flow from the discriminator's input back into the generator.
pub fn sample_replacements<F: Real>(
    gen_logits: &Tensor<F>,
    batch: &MaskedBatch,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<Vec<TokenSequence>> {
    if temperature <= 0.0 {
        return Err(Error::config("temperature", "must be positive"));
    }
    let shape = gen_logits.shape();
    let (s, v) = (shape[1], shape[2]);
    let logits = gen_logits.to_vec();
    let mut out = Vec::with_capacity(batch.original.len());
    for (bi, seq) in batch.original.iter().enumerate() {
        let mut ids = seq.ids.clone();
        for &pos in &batch.masked[bi] {
            let row = &logits[(bi * s + pos) * v..(bi * s + pos + 1) * v];
            let scaled: Vec<f64> = row.iter().map(|l| l.into_f64() / temperature).collect();
            let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return Err(Error::NonFinite { op: "sample_replacements" });
            }
            let weights: Vec<f64> = scaled.iter().map(|l| (l - m).exp()).collect();
            let total: f64 = weights.iter().sum();
            // max() skips NaN operands, so a NaN logit still reaches this
            // point; it poisons the weight sum instead.
            if !total.is_finite() || total <= 0.0 {
                return Err(Error::NonFinite { op: "sample_replacements" });
            }
            let mut u = rng.gen::<f64>() * total;
            let mut drawn = v - 1;
            for (tok, w) in weights.iter().enumerate() {
                if u < *w {
                    drawn = tok;
                    break;
                }
                u -= w;
            }
            ids[pos] = drawn;
        }
        out.push(TokenSequence { ids });
    }
    Ok(out)
}

/// Per-position "still original" labels: 1 wherever the discriminator input
/// matches the original token, masked or not.
pub fn rtd_labels(batch: &MaskedBatch, x_tilde_d: &[TokenSequence]) -> Vec<Vec<u8>> {
    batch
        .original
        .iter()
        .zip(x_tilde_d)
        .map(|(orig, tilde)| {
            orig.ids.iter().zip(&tilde.ids).map(|(a, b)| u8::from(a == b)).collect()
        })
        .collect()
}

/// Mean binary cross-entropy over real (non-pad) positions. `labels` and
/// `real` are laid out (B, S) flat to match the padded logits.
pub fn rtd_loss<F: Real>(
    tape: &Tape<F>,
    disc_logits: &Tensor<F>,
    labels: &[F],
    real: &[bool],
) -> Result<Tensor<F>> {
    let n = disc_logits.numel();
    if labels.len() != n || real.len() != n {
        return Err(Error::ShapeMismatch {
            op: "rtd_loss",
            detail: format!("{n} logits vs {} labels, {} mask flags", labels.len(), real.len()),
        });
    }
    let n_real = real.iter().filter(|&&r| r).count();
    if n_real == 0 {
        return Err(Error::Corpus("batch has no real positions".into()));
    }
    let elementwise = tape.bce_with_logits(disc_logits, labels)?;
    let mask_vals: Vec<F> =
        real.iter().map(|&r| if r { F::from_f64(1.0) } else { F::from_f64(0.0) }).collect();
    let mask = Tensor::from_vec(mask_vals, disc_logits.shape())?;
    let kept = tape.mul(&elementwise, &mask)?;
    tape.scale(&tape.sum(&kept)?, F::from_f64(1.0 / n_real as f64))
}

/// Flattened (B, S) labels for padded batches; PAD fill is labeled original,
/// which the loss mask then ignores.
pub fn pad_labels<F: Real>(labels: &[Vec<u8>], s: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(labels.len() * s);
    for row in labels {
        for i in 0..s {
            let l = row.get(i).copied().unwrap_or(1);
            out.push(F::from_f64(f64::from(l)));
        }
    }
    out
}
