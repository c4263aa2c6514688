use crate::autodiff::{Tape, Tensor};
use crate::encoder::params::{const_param, gaussian_param, INIT_STD, LN_EPS};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::StreamSeeds;

/// Token-reconstruction head: dense + GELU + layer norm, then logits against
/// the embedding table (tied) or a private output table (untied), plus a
/// per-token bias.
#[derive(Debug, Clone)]
pub struct MlmHead<F: Real> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
    pub ln_g: Tensor<F>,
    pub ln_b: Tensor<F>,
    pub out_bias: Tensor<F>,
    pub untied: Option<Tensor<F>>,
}

impl<F: Real> MlmHead<F> {
    pub fn init(hidden: usize, vocab: usize, tied: bool, seeds: &StreamSeeds, prefix: &str) -> Self {
        MlmHead {
            w: gaussian_param(seeds, &format!("{prefix}/w"), &[hidden, hidden], INIT_STD),
            b: const_param(0.0, &[hidden]),
            ln_g: const_param(1.0, &[hidden]),
            ln_b: const_param(0.0, &[hidden]),
            out_bias: const_param(0.0, &[vocab]),
            untied: (!tied)
                .then(|| gaussian_param(seeds, &format!("{prefix}/untied"), &[vocab, hidden], INIT_STD)),
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}/w"), self.w.clone()));
        out.push((format!("{prefix}/b"), self.b.clone()));
        out.push((format!("{prefix}/ln_g"), self.ln_g.clone()));
        out.push((format!("{prefix}/ln_b"), self.ln_b.clone()));
        out.push((format!("{prefix}/out_bias"), self.out_bias.clone()));
        if let Some(t) = &self.untied {
            out.push((format!("{prefix}/untied"), t.clone()));
        }
    }

    /// h (B, S, H) and the live embedding table E (V, H) -> logits (B, S, V).
    /// When tied, gradients reach E both here and through the input gather.
    pub fn forward(&self, tape: &Tape<F>, h: &Tensor<F>, embedding: &Tensor<F>) -> Result<Tensor<F>> {
        let table = self.untied.as_ref().unwrap_or(embedding);
        if h.shape().last() != Some(&table.shape()[1]) {
            return Err(Error::ShapeMismatch {
                op: "mlm_head",
                detail: format!("hidden {:?} vs table {:?}", h.shape(), table.shape()),
            });
        }
        let t = tape.add(&tape.matmul(h, &self.w)?, &self.b)?;
        let t = tape.layer_norm(&tape.gelu(&t)?, &self.ln_g, &self.ln_b, LN_EPS)?;
        let logits = tape.matmul(&t, &tape.transpose(table, 0, 1)?)?;
        tape.add(&logits, &self.out_bias)
    }
}

/// Replaced-token detector: dense + GELU + scalar projection per position.
/// Positive logit means "original" under the sigmoid readout.
#[derive(Debug, Clone)]
pub struct RtdHead<F: Real> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
    pub v: Tensor<F>,
    pub c: Tensor<F>,
}

impl<F: Real> RtdHead<F> {
    pub fn init(hidden: usize, seeds: &StreamSeeds, prefix: &str) -> Self {
        RtdHead {
            w: gaussian_param(seeds, &format!("{prefix}/w"), &[hidden, hidden], INIT_STD),
            b: const_param(0.0, &[hidden]),
            v: gaussian_param(seeds, &format!("{prefix}/v"), &[hidden, 1], INIT_STD),
            c: const_param(0.0, &[1]),
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}/w"), self.w.clone()));
        out.push((format!("{prefix}/b"), self.b.clone()));
        out.push((format!("{prefix}/v"), self.v.clone()));
        out.push((format!("{prefix}/c"), self.c.clone()));
    }

    /// h (B, S, H) -> logits (B, S).
    pub fn forward(&self, tape: &Tape<F>, h: &Tensor<F>) -> Result<Tensor<F>> {
        if h.shape().len() != 3 || h.shape()[2] != self.w.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "rtd_head",
                detail: format!("input {:?} vs hidden {}", h.shape(), self.w.shape()[0]),
            });
        }
        let (b, s) = (h.shape()[0], h.shape()[1]);
        let t = tape.gelu(&tape.add(&tape.matmul(h, &self.w)?, &self.b)?)?;
        let logits = tape.add(&tape.matmul(&t, &self.v)?, &self.c)?;
        tape.reshape(&logits, &[b, s])
    }
}
