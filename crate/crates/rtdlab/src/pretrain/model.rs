//! Parameter storage for the generator/discriminator pair under the three
//! embedding-sharing arrangements.
//!
//! Every tensor is created from a named init stream, so the generator side
//! draws identical values in every mode under the same master seed. The only
//! thing a mode changes is which table the discriminator embeds through:
//!
//!   es:   the generator table itself
//!   nes:  a private table e_d
//!   gdes: stop_gradient(e_g) + e_delta, with e_delta starting at zero

use crate::autodiff::{Tape, Tensor};
use crate::encoder::{gaussian_param, BodyParams, MlmHead, RtdHead, INIT_STD};
use crate::error::Result;
use crate::real::Real;
use crate::rng::StreamSeeds;
use crate::text::Vocab;

use super::{SharingMode, TrainConfig};

pub struct ModelBundle<F: Real> {
    pub mode: SharingMode,
    pub vocab: Vocab,
    pub e_g: Tensor<F>,
    pub e_d: Option<Tensor<F>>,
    pub e_delta: Option<Tensor<F>>,
    pub gen_body: BodyParams<F>,
    pub disc_body: BodyParams<F>,
    pub mlm: MlmHead<F>,
    pub rtd: RtdHead<F>,
}

impl<F: Real> ModelBundle<F> {
    pub fn init(cfg: &TrainConfig, vocab: Vocab, seeds: &StreamSeeds) -> Self {
        let v = vocab.len();
        let e_g = gaussian_param(seeds, "e_g", &[v, cfg.gen.hidden], INIT_STD);
        let e_d = (cfg.mode == SharingMode::Nes)
            .then(|| gaussian_param(seeds, "e_d", &[v, cfg.disc.hidden], INIT_STD));
        let e_delta = (cfg.mode == SharingMode::Gdes)
            .then(|| Tensor::param(vec![F::zero(); v * cfg.disc.hidden], &[v, cfg.disc.hidden]))
            .transpose()
            .expect("shape matches element count");
        ModelBundle {
            mode: cfg.mode,
            e_g,
            e_d,
            e_delta,
            gen_body: BodyParams::init(&cfg.gen, cfg.max_seq_len, seeds, "gen"),
            disc_body: BodyParams::init(&cfg.disc, cfg.max_seq_len, seeds, "disc"),
            mlm: MlmHead::init(cfg.gen.hidden, v, cfg.mlm_tied, seeds, "mlm"),
            rtd: RtdHead::init(cfg.disc.hidden, seeds, "rtd"),
            vocab,
        }
    }

    /// Table the discriminator embeds through. For gdes this records an add
    /// on the tape whose e_g side is severed, so the RTD backward can only
    /// reach e_delta.
    pub fn disc_embedding_table(&self, tape: &Tape<F>) -> Result<Tensor<F>> {
        match self.mode {
            SharingMode::Es => Ok(self.e_g.clone()),
            SharingMode::Nes => Ok(self.e_d.as_ref().expect("nes has e_d").clone()),
            SharingMode::Gdes => {
                let delta = self.e_delta.as_ref().expect("gdes has e_delta");
                tape.add(&tape.stop_gradient(&self.e_g), delta)
            }
        }
    }

    /// Parameters the MLM phase updates, metrics order.
    pub fn generator_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = vec![("e_g".to_string(), self.e_g.clone())];
        self.gen_body.named_params("gen", &mut out);
        self.mlm.named_params("mlm", &mut out);
        out
    }

    /// Parameters the RTD phase updates. Empty embedding slot for es, where
    /// the shared table already sits in the generator list.
    pub fn discriminator_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        match self.mode {
            SharingMode::Es => {}
            SharingMode::Nes => out.push(("e_d".to_string(), self.e_d.as_ref().expect("nes").clone())),
            SharingMode::Gdes => {
                out.push(("e_delta".to_string(), self.e_delta.as_ref().expect("gdes").clone()))
            }
        }
        self.disc_body.named_params("disc", &mut out);
        self.rtd.named_params("rtd", &mut out);
        out
    }

    /// Every trainable tensor exactly once: generator list then
    /// discriminator list.
    pub fn named_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = self.generator_params();
        out.extend(self.discriminator_params());
        out
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }
}

/// Weight-decay gates for a named parameter list. Everything decays except
/// e_delta when the switch is off.
pub fn decay_flags<F: Real>(params: &[(String, Tensor<F>)], decay_e_delta: bool) -> Vec<bool> {
    params
        .iter()
        .map(|(name, _)| decay_e_delta || name != "e_delta")
        .collect()
}
