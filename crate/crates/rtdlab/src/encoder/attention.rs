use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::encoder::config::{AttentionMode, EncoderConfig};
use crate::encoder::params::LayerParams;
use crate::error::{Error, Result};
use crate::real::Real;

/// Additive logit bias that blanks out padded key positions: 0 at real keys,
/// a large negative constant at PAD fill, shaped (B, S, S) and constant
/// across heads and layers.
pub fn attention_mask_bias<F: Real>(real: &[bool], b: usize, s: usize) -> Tensor<F> {
    assert_eq!(real.len(), b * s, "mask length must be b*s");
    let neg = F::from_f64(-1e9);
    let zero = F::from_f64(0.0);
    let mut vals = Vec::with_capacity(b * s * s);
    for bi in 0..b {
        for _query in 0..s {
            for key in 0..s {
                vals.push(if real[bi * s + key] { zero } else { neg });
            }
        }
    }
    Tensor::from_vec(vals, &[b, s, s]).expect("shape matches generated length")
}

/// Logit scale implied by the config: 1/sqrt(d) for standard attention,
/// 1/sqrt(3d) in disentangled mode where three dot products sum per pair.
pub fn default_scale(cfg: &EncoderConfig) -> f64 {
    let d = cfg.d_head() as f64;
    match cfg.attention_mode {
        AttentionMode::Standard => 1.0 / d.sqrt(),
        AttentionMode::Disentangled => 1.0 / (3.0 * d).sqrt(),
    }
}

/// Flattened clamped-distance index: entry [(b, r), c] points at the
/// relative-position row for offset c - r. One table serves both the c2p
/// gather (rows are queries) and the p2c gather (rows are keys), because
/// both need the offset of the column position relative to the row position.
fn rel_index(b: usize, s: usize, max_rel: usize) -> Vec<usize> {
    let horizon = max_rel as i64 - 1;
    let mut idx = Vec::with_capacity(b * s * s);
    for _ in 0..b {
        for r in 0..s as i64 {
            for c in 0..s as i64 {
                idx.push(((c - r).clamp(-horizon, horizon) + horizon) as usize);
            }
        }
    }
    idx
}

/// Multi-head attention over normalized inputs x of shape (B, S, H).
///
/// Standard mode scores queries against keys. Disentangled mode adds two
/// positional terms per pair (i, j), computed from a shared relative-position
/// table R and per-layer projections:
///
///   logit[i][j] = Qc_i . Kc_j  +  Qc_i . (R Wk_pos)[d(j - i)]  +  Kc_j . (R Wq_pos)[d(i - j)]
///
/// where d clamps the offset to the table horizon. Values aggregate content
/// only. `scale` multiplies logits before masking; pass `default_scale`
/// unless deliberately aligning the two modes for comparison.
pub fn attention_forward<F: Real, R: Rng>(
    tape: &Tape<F>,
    x: &Tensor<F>,
    layer: &LayerParams<F>,
    rel_pos: Option<&Tensor<F>>,
    cfg: &EncoderConfig,
    mask_bias: Option<&Tensor<F>>,
    scale: f64,
    rng: &mut R,
) -> Result<Tensor<F>> {
    if x.shape().len() != 3 || x.shape()[2] != cfg.hidden {
        return Err(Error::ShapeMismatch {
            op: "attention",
            detail: format!("input {:?} vs hidden {}", x.shape(), cfg.hidden),
        });
    }
    let (b, s) = (x.shape()[0], x.shape()[1]);
    let dh = cfg.d_head();

    let q = tape.add(&tape.matmul(x, &layer.wq)?, &layer.bq)?;
    let k = tape.add(&tape.matmul(x, &layer.wk)?, &layer.bk)?;
    let v = tape.add(&tape.matmul(x, &layer.wv)?, &layer.bv)?;

    let da = cfg.attention_mode == AttentionMode::Disentangled;
    let (kr, qr, idx) = if da {
        let rel = rel_pos.ok_or(Error::ShapeMismatch {
            op: "attention",
            detail: "disentangled mode without a relative-position table".into(),
        })?;
        let wq_pos = layer.wq_pos.as_ref().expect("disentangled layer has wq_pos");
        let wk_pos = layer.wk_pos.as_ref().expect("disentangled layer has wk_pos");
        let kr = tape.matmul(rel, wk_pos)?;
        let qr = tape.matmul(rel, wq_pos)?;
        (Some(kr), Some(qr), rel_index(b, s, cfg.max_rel_distance))
    } else {
        (None, None, Vec::new())
    };

    let mut heads = Vec::with_capacity(cfg.n_heads);
    for hd in 0..cfg.n_heads {
        let qh = tape.slice(&q, 2, hd * dh, dh)?;
        let kh = tape.slice(&k, 2, hd * dh, dh)?;
        let vh = tape.slice(&v, 2, hd * dh, dh)?;

        let kt = tape.transpose(&kh, 1, 2)?;
        let mut logits = tape.matmul(&qh, &kt)?;

        if let (Some(kr), Some(qr)) = (&kr, &qr) {
            let krh = tape.slice(kr, 1, hd * dh, dh)?;
            let c2p_by_offset = tape.matmul(&qh, &tape.transpose(&krh, 0, 1)?)?;
            let c2p = tape.take_per_row(&c2p_by_offset, &idx, s)?;

            let qrh = tape.slice(qr, 1, hd * dh, dh)?;
            let p2c_by_offset = tape.matmul(&kh, &tape.transpose(&qrh, 0, 1)?)?;
            // Rows of this gather run over keys j; transposing the last two
            // axes lands entry [j][i] at [i][j].
            let p2c = tape.transpose(&tape.take_per_row(&p2c_by_offset, &idx, s)?, 1, 2)?;

            logits = tape.add(&tape.add(&logits, &c2p)?, &p2c)?;
        }

        logits = tape.scale(&logits, F::from_f64(scale))?;
        if let Some(bias) = mask_bias {
            logits = tape.add(&logits, bias)?;
        }
        let probs = tape.softmax(&logits)?;
        let probs = tape.dropout(&probs, cfg.dropout, rng)?;
        heads.push(tape.matmul(&probs, &vh)?);
    }

    let head_refs: Vec<&Tensor<F>> = heads.iter().collect();
    let ctx = tape.concat(&head_refs, 2)?;
    tape.add(&tape.matmul(&ctx, &layer.wo)?, &layer.bo)
}
