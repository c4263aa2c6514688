//! Per-step training logic for the three sharing modes.
//!
//! es runs one joint graph and a single backward; nes and gdes alternate a
//! generator phase (MLM) and a discriminator phase (scaled RTD) on separate
//! tapes, with the phase 1 update landing before phase 2 runs its forward.
//!
//! Every stochastic choice draws from a named stream keyed by step, so two
//! runs that share a master seed and touch the same streams make identical
//! draws regardless of what else differs between them. That is what makes
//! the nes and gdes generator trajectories comparable bitwise.

use crate::autodiff::{Tape, Tensor};
use crate::encoder::{attention_mask_bias, embed_with_positions, encoder_forward};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::StreamSeeds;
use crate::text::{mask_tokens, pad_batch, sample_batch, MaskedBatch, PaddedBatch, TokenSequence, Vocab};

use super::losses::{mlm_loss, pad_labels, rtd_labels, rtd_loss, sample_replacements};
use super::model::{decay_flags, ModelBundle};
use super::optim::{adamw_update, lr_schedule, AdamHyper, OptimizerState};
use super::{SharingMode, TrainConfig};

/// One row of the metrics stream. Losses are raw (the RTD column is not
/// multiplied by lambda); norms are pre-clip global gradient norms over the
/// generator and discriminator parameter lists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss_mlm: f64,
    pub loss_rtd: f64,
    pub lr: f64,
    pub grad_norm_g: f64,
    pub grad_norm_d: f64,
}

/// Sampled, masked, and padded input for one step.
pub struct StepBatch {
    pub masked: MaskedBatch,
    /// Corrupted ids (the generator's input), padded.
    pub padded: PaddedBatch,
}

impl StepBatch {
    /// Draws the step's sequences from the "data" stream and its mask choices
    /// from the "mask" stream.
    pub fn build(
        docs: &[TokenSequence],
        cfg: &TrainConfig,
        vocab_size: usize,
        seeds: &StreamSeeds,
        step: u64,
    ) -> Result<StepBatch> {
        if docs.is_empty() {
            return Err(Error::Corpus("no documents to sample from".into()));
        }
        let mut data_rng = seeds.rng_at("data", step);
        let chosen = sample_batch(docs, cfg.batch_size, &mut data_rng);
        let mut mask_rng = seeds.rng_at("mask", step);
        let masked = mask_tokens(&chosen, &cfg.mask, vocab_size, &mut mask_rng)?;
        let padded = pad_batch(&masked.corrupted);
        Ok(StepBatch { masked, padded })
    }
}

/// Generator forward and MLM loss, plus the discriminator input sampled from
/// the same logits. The sample draw is values-only: nothing it produces is
/// connected to `tape`.
pub fn build_gen_side<F: Real>(
    tape: &Tape<F>,
    bundle: &ModelBundle<F>,
    cfg: &TrainConfig,
    sb: &StepBatch,
    seeds: &StreamSeeds,
    step: u64,
) -> Result<(Tensor<F>, Vec<TokenSequence>)> {
    let (b, s) = (sb.padded.b, sb.padded.s);
    let bias = attention_mask_bias(&sb.padded.real, b, s);
    let x = embed_with_positions(tape, &bundle.e_g, &bundle.gen_body, &sb.padded.ids, b, s)?;
    let mut drop_rng = seeds.rng_at("dropout/gen", step);
    let h = encoder_forward(tape, &x, &bundle.gen_body.encoder, &cfg.gen, Some(&bias), &mut drop_rng)?;
    let logits = bundle.mlm.forward(tape, &h, &bundle.e_g)?;
    let loss = mlm_loss(tape, &logits, &sb.masked)?;
    // Catch a blown-up forward here, before the sampler trips over the same
    // logits and reports a less useful error.
    if !loss.item().into_f64().is_finite() {
        return Err(Error::Diverged { step: step as usize, what: "MLM loss".into() });
    }
    let mut sample_rng = seeds.rng_at("sample", step);
    let x_tilde = sample_replacements(&logits, &sb.masked, cfg.temperature, &mut sample_rng)?;
    Ok((loss, x_tilde))
}

/// Discriminator forward on the sampled input and the raw (un-scaled) RTD
/// loss. The embedding table comes from the bundle's mode.
pub fn build_disc_side<F: Real>(
    tape: &Tape<F>,
    bundle: &ModelBundle<F>,
    cfg: &TrainConfig,
    sb: &StepBatch,
    x_tilde: &[TokenSequence],
    seeds: &StreamSeeds,
    step: u64,
) -> Result<Tensor<F>> {
    let labels = rtd_labels(&sb.masked, x_tilde);
    let tilde = pad_batch(x_tilde);
    let (b, s) = (tilde.b, tilde.s);
    let bias = attention_mask_bias(&tilde.real, b, s);
    let table = bundle.disc_embedding_table(tape)?;
    let x = embed_with_positions(tape, &table, &bundle.disc_body, &tilde.ids, b, s)?;
    let mut drop_rng = seeds.rng_at("dropout/disc", step);
    let h = encoder_forward(tape, &x, &bundle.disc_body.encoder, &cfg.disc, Some(&bias), &mut drop_rng)?;
    let logits = bundle.rtd.forward(tape, &h)?;
    rtd_loss(tape, &logits, &pad_labels(&labels, s), &tilde.real)
}

fn grad_norm<F: Real>(params: &[(String, Tensor<F>)]) -> f64 {
    params
        .iter()
        .map(|(_, p)| p.grad_or_zeros().iter().map(|g| g.into_f64() * g.into_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

fn finite_or_diverged<F: Real>(loss: &Tensor<F>, step: u64, what: &str) -> Result<f64> {
    let v = loss.item().into_f64();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged { step: step as usize, what: what.to_string() })
    }
}

pub struct Trainer<F: Real> {
    pub cfg: TrainConfig,
    pub bundle: ModelBundle<F>,
    pub seeds: StreamSeeds,
    pub docs: Vec<TokenSequence>,
    hyper: AdamHyper,
    opt_joint: Option<OptimizerState>,
    opt_gen: Option<OptimizerState>,
    opt_disc: Option<OptimizerState>,
    pub step: u64,
    /// Phase 2 switch for nes/gdes; leaving it off turns those modes into a
    /// pure MLM run. Ignored by es.
    pub rtd_phase_enabled: bool,
}

fn tensors_of<F: Real>(params: &[(String, Tensor<F>)]) -> Vec<Tensor<F>> {
    params.iter().map(|(_, t)| t.clone()).collect()
}

impl<F: Real> Trainer<F> {
    pub fn new(cfg: TrainConfig, vocab: Vocab, docs: Vec<TokenSequence>) -> Result<Self> {
        cfg.validate()?;
        let seeds = StreamSeeds::new(cfg.seed);
        let bundle = ModelBundle::init(&cfg, vocab, &seeds);
        let hyper = AdamHyper::from_config(&cfg);
        let (opt_joint, opt_gen, opt_disc) = match cfg.mode {
            SharingMode::Es => {
                (Some(OptimizerState::for_params(&tensors_of(&bundle.named_params()))), None, None)
            }
            _ => (
                None,
                Some(OptimizerState::for_params(&tensors_of(&bundle.generator_params()))),
                Some(OptimizerState::for_params(&tensors_of(&bundle.discriminator_params())))),
        };
        Ok(Trainer {
            cfg,
            bundle,
            seeds,
            docs,
            hyper,
            opt_joint,
            opt_gen,
            opt_disc,
            step: 0,
            rtd_phase_enabled: true,
        })
    }

    pub fn next_batch(&self) -> Result<StepBatch> {
        StepBatch::build(&self.docs, &self.cfg, self.bundle.vocab.len(), &self.seeds, self.step)
    }

    pub fn lr_now(&self) -> f64 {
        lr_schedule(self.step, self.cfg.warmup_steps, self.cfg.max_steps, self.cfg.lr_peak)
    }

    /// Runs one full training step on a freshly drawn batch and advances the
    /// step counter.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let sb = self.next_batch()?;
        let rec = match self.cfg.mode {
            SharingMode::Es => self.step_es(&sb),
            SharingMode::Nes | SharingMode::Gdes => self.step_alternating(&sb),
        };
        // A non-finite value anywhere in a step (overflowed gradients in the
        // optimizer, blown-up sampler weights) is divergence, not an API
        // misuse; report it with the step number.
        let rec = match rec {
            Err(Error::NonFinite { op }) => {
                return Err(Error::Diverged { step: self.step as usize, what: format!("output of {op}") })
            }
            other => other?,
        };
        self.step += 1;
        Ok(rec)
    }

    fn step_es(&mut self, sb: &StepBatch) -> Result<MetricsRecord> {
        let tape = Tape::new();
        let (l_mlm, x_tilde) = build_gen_side(&tape, &self.bundle, &self.cfg, sb, &self.seeds, self.step)?;
        let l_rtd = build_disc_side(&tape, &self.bundle, &self.cfg, sb, &x_tilde, &self.seeds, self.step)?;
        let loss = tape.add(&l_mlm, &tape.scale(&l_rtd, F::from_f64(self.cfg.lambda))?)?;
        let loss_mlm = finite_or_diverged(&l_mlm, self.step, "MLM loss")?;
        let loss_rtd = finite_or_diverged(&l_rtd, self.step, "RTD loss")?;
        self.bundle.zero_grads();
        tape.backward(&loss)?;
        let grad_norm_g = grad_norm(&self.bundle.generator_params());
        let grad_norm_d = grad_norm(&self.bundle.discriminator_params());
        let params = self.bundle.named_params();
        let lr = self.lr_now();
        adamw_update(
            &tensors_of(&params),
            &decay_flags(&params, self.cfg.decay_e_delta),
            self.opt_joint.as_mut().expect("es uses the joint optimizer"),
            &self.hyper,
            lr,
        )?;
        Ok(MetricsRecord { step: self.step, loss_mlm, loss_rtd, lr, grad_norm_g, grad_norm_d })
    }

    /// Phase 1 of an alternating step: generator forward on the masked batch,
    /// MLM backward, update of {theta_G, E_G}. Returns the loss value, the
    /// pre-clip gradient norm, and the sampled discriminator input (drawn
    /// from the pre-update logits).
    pub fn run_phase1(&mut self, sb: &StepBatch) -> Result<(f64, f64, Vec<TokenSequence>)> {
        let tape = Tape::new();
        let (l_mlm, x_tilde) = build_gen_side(&tape, &self.bundle, &self.cfg, sb, &self.seeds, self.step)?;
        let loss_mlm = finite_or_diverged(&l_mlm, self.step, "MLM loss")?;
        let params = self.bundle.generator_params();
        for (_, p) in &params {
            p.zero_grad();
        }
        tape.backward(&l_mlm)?;
        let lr = self.lr_now();
        let norm = adamw_update(
            &tensors_of(&params),
            &decay_flags(&params, self.cfg.decay_e_delta),
            self.opt_gen.as_mut().expect("alternating modes use the generator optimizer"),
            &self.hyper,
            lr,
        )?;
        Ok((loss_mlm, norm, x_tilde))
    }

    /// Phase 2: discriminator forward on the sampled input, backward of
    /// lambda * L_RTD, update of the discriminator list. Returns the raw RTD
    /// loss and the pre-clip norm of the scaled gradients.
    pub fn run_phase2(&mut self, sb: &StepBatch, x_tilde: &[TokenSequence]) -> Result<(f64, f64)> {
        let tape = Tape::new();
        let l_rtd = build_disc_side(&tape, &self.bundle, &self.cfg, sb, x_tilde, &self.seeds, self.step)?;
        let loss_rtd = finite_or_diverged(&l_rtd, self.step, "RTD loss")?;
        let scaled = tape.scale(&l_rtd, F::from_f64(self.cfg.lambda))?;
        let params = self.bundle.discriminator_params();
        for (_, p) in &params {
            p.zero_grad();
        }
        tape.backward(&scaled)?;
        let lr = self.lr_now();
        let norm = adamw_update(
            &tensors_of(&params),
            &decay_flags(&params, self.cfg.decay_e_delta),
            self.opt_disc.as_mut().expect("alternating modes use the discriminator optimizer"),
            &self.hyper,
            lr,
        )?;
        Ok((loss_rtd, norm))
    }

    fn step_alternating(&mut self, sb: &StepBatch) -> Result<MetricsRecord> {
        let lr = self.lr_now();
        let (loss_mlm, grad_norm_g, x_tilde) = self.run_phase1(sb)?;
        let (loss_rtd, grad_norm_d) = if self.rtd_phase_enabled {
            self.run_phase2(sb, &x_tilde)?
        } else {
            (0.0, 0.0)
        };
        Ok(MetricsRecord { step: self.step, loss_mlm, loss_rtd, lr, grad_norm_g, grad_norm_d })
    }
}
