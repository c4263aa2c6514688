use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::encoder::config::{AttentionMode, EncoderConfig};
use crate::real::Real;
use crate::rng::StreamSeeds;

pub const INIT_STD: f64 = 0.02;
// Small enough that normalized rows hit unit variance to 1e-6 even at f64;
// still guards zero-variance rows.
pub const LN_EPS: f64 = 1e-9;

/// Gaussian init drawn in f64 from the stream named after the parameter, so
/// an f32 and an f64 model built from the same master seed start at the same
/// point up to rounding.
pub fn gaussian_param<F: Real>(
    seeds: &StreamSeeds,
    name: &str,
    shape: &[usize],
    std: f64,
) -> Tensor<F> {
    let mut rng = seeds.rng(&format!("init/{name}"));
    let normal = Normal::new(0.0f64, std).expect("std is positive");
    let n: usize = shape.iter().product();
    let vals: Vec<F> = (0..n).map(|_| F::from_f64(normal.sample(&mut rng))).collect();
    Tensor::param(vals, shape).expect("shape matches generated length")
}

pub fn const_param<F: Real>(value: f64, shape: &[usize]) -> Tensor<F> {
    let n: usize = shape.iter().product();
    Tensor::param(vec![F::from_f64(value); n], shape).expect("shape matches generated length")
}

#[derive(Debug, Clone)]
pub struct LayerParams<F: Real> {
    pub ln1_g: Tensor<F>,
    pub ln1_b: Tensor<F>,
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    pub wk: Tensor<F>,
    pub bk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
    pub wq_pos: Option<Tensor<F>>,
    pub wk_pos: Option<Tensor<F>>,
    pub ln2_g: Tensor<F>,
    pub ln2_b: Tensor<F>,
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

impl<F: Real> LayerParams<F> {
    fn init(cfg: &EncoderConfig, seeds: &StreamSeeds, prefix: &str) -> Self {
        let h = cfg.hidden;
        let f = cfg.ffn_inner;
        let da = cfg.attention_mode == AttentionMode::Disentangled;
        let g = |name: &str, shape: &[usize]| gaussian_param(seeds, &format!("{prefix}/{name}"), shape, INIT_STD);
        LayerParams {
            ln1_g: const_param(1.0, &[h]),
            ln1_b: const_param(0.0, &[h]),
            wq: g("wq", &[h, h]),
            bq: const_param(0.0, &[h]),
            wk: g("wk", &[h, h]),
            bk: const_param(0.0, &[h]),
            wv: g("wv", &[h, h]),
            bv: const_param(0.0, &[h]),
            wo: g("wo", &[h, h]),
            bo: const_param(0.0, &[h]),
            wq_pos: da.then(|| g("wq_pos", &[h, h])),
            wk_pos: da.then(|| g("wk_pos", &[h, h])),
            ln2_g: const_param(1.0, &[h]),
            ln2_b: const_param(0.0, &[h]),
            w1: g("w1", &[h, f]),
            b1: const_param(0.0, &[f]),
            w2: g("w2", &[f, h]),
            b2: const_param(0.0, &[h]),
        }
    }

    fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        let mut push = |name: &str, t: &Tensor<F>| out.push((format!("{prefix}/{name}"), t.clone()));
        push("ln1_g", &self.ln1_g);
        push("ln1_b", &self.ln1_b);
        push("wq", &self.wq);
        push("bq", &self.bq);
        push("wk", &self.wk);
        push("bk", &self.bk);
        push("wv", &self.wv);
        push("bv", &self.bv);
        push("wo", &self.wo);
        push("bo", &self.bo);
        if let Some(t) = &self.wq_pos {
            push("wq_pos", t);
        }
        if let Some(t) = &self.wk_pos {
            push("wk_pos", t);
        }
        push("ln2_g", &self.ln2_g);
        push("ln2_b", &self.ln2_b);
        push("w1", &self.w1);
        push("b1", &self.b1);
        push("w2", &self.w2);
        push("b2", &self.b2);
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams<F: Real> {
    pub layers: Vec<LayerParams<F>>,
    pub rel_pos: Option<Tensor<F>>,
}

impl<F: Real> EncoderParams<F> {
    pub fn init(cfg: &EncoderConfig, seeds: &StreamSeeds, prefix: &str) -> Self {
        let layers = (0..cfg.n_layers)
            .map(|i| LayerParams::init(cfg, seeds, &format!("{prefix}/layer{i}")))
            .collect();
        let rel_pos = (cfg.attention_mode == AttentionMode::Disentangled).then(|| {
            gaussian_param(seeds, &format!("{prefix}/rel_pos"), &[cfg.rel_rows(), cfg.hidden], INIT_STD)
        });
        EncoderParams { layers, rel_pos }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.named_params(&format!("{prefix}/layer{i}"), out);
        }
        if let Some(t) = &self.rel_pos {
            out.push((format!("{prefix}/rel_pos"), t.clone()));
        }
    }
}

/// Encoder body plus its learned absolute-position table.
#[derive(Debug, Clone)]
pub struct BodyParams<F: Real> {
    pub encoder: EncoderParams<F>,
    pub abs_pos: Tensor<F>,
}

impl<F: Real> BodyParams<F> {
    pub fn init(cfg: &EncoderConfig, max_seq_len: usize, seeds: &StreamSeeds, prefix: &str) -> Self {
        BodyParams {
            encoder: EncoderParams::init(cfg, seeds, prefix),
            abs_pos: gaussian_param(
                seeds,
                &format!("{prefix}/abs_pos"),
                &[max_seq_len, cfg.hidden],
                INIT_STD,
            ),
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<F>)>) {
        out.push((format!("{prefix}/abs_pos"), self.abs_pos.clone()));
        self.encoder.named_params(prefix, out);
    }

    pub fn max_seq_len(&self) -> usize {
        self.abs_pos.shape()[0]
    }
}
