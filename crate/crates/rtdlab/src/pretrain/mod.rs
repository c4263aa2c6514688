//! Replaced-token-detection pre-training: the MLM and RTD losses, the three
//! embedding-sharing regimes, AdamW with a linear warmup/decay schedule, the
//! training loop, and checkpoint serialization.
//!
//! The sharing modes differ only in how the discriminator reaches its token
//! embeddings:
//!   es    one table, one tape, one joint update
//!   nes   two tables, alternating phase updates that share no storage
//!   gdes  the discriminator embeds through sg(E_G) + E_delta, so the RTD
//!         backward can reach E_delta but structurally cannot reach E_G

mod checkpoint;
mod losses;
mod model;
mod optim;
mod run;
mod steps;


use crate::error::{Error, Result};

pub use checkpoint::{
    bundle_from_checkpoint, discriminator_view, fill_params, load_checkpoint, save_checkpoint,
    CheckpointKind, DiscriminatorView, LoadedCheckpoint, ParamRecord,
};
pub use losses::{mlm_loss, rtd_labels, rtd_loss, sample_replacements};
pub use model::{decay_flags, ModelBundle};
pub use optim::{adamw_update, lr_schedule, AdamHyper, OptimizerState};
pub use run::{
    corpus_and_vocab, export_discriminator, pretrain, RunArtifacts, COSINE_HEADER, METRICS_HEADER,
};
pub use steps::{build_disc_side, build_gen_side, MetricsRecord, StepBatch, Trainer};

use crate::encoder::{expected_generator_depth, AttentionMode, EncoderConfig};
use crate::real::Dtype;
use crate::text::MaskPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SharingMode {
    Es,
    Nes,
    Gdes,
}

impl SharingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "es" => Ok(SharingMode::Es),
            "nes" => Ok(SharingMode::Nes),
            "gdes" => Ok(SharingMode::Gdes),
            other => Err(Error::config("mode", format!("unknown mode {other:?}, expected es, nes, or gdes"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SharingMode::Es => "es",
            SharingMode::Nes => "nes",
            SharingMode::Gdes => "gdes",
        }
    }
}

/// Everything one pre-training run needs beyond the corpus itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: SharingMode,
    pub lambda: f64,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub mask: MaskPolicy,
    pub temperature: f64,
    pub gen: EncoderConfig,
    pub disc: EncoderConfig,
    pub max_seq_len: usize,
    pub vocab_target: usize,
    pub corpus_tokens: usize,
    pub mlm_tied: bool,
    pub decay_e_delta: bool,
    pub allow_shape_override: bool,
    pub precision: Dtype,
    pub diag_every: u64,
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: a 2-layer discriminator with a 1-layer generator
    /// at hidden 64, batch 32, 2000 steps.
    pub fn desk_defaults() -> Self {
        let disc = EncoderConfig {
            n_layers: 2,
            hidden: 64,
            n_heads: 4,
            ffn_inner: 128,
            max_rel_distance: 16,
            attention_mode: AttentionMode::Disentangled,
            dropout: 0.0,
        };
        let gen = EncoderConfig { n_layers: expected_generator_depth(disc.n_layers), ..disc.clone() };
        TrainConfig {
            mode: SharingMode::Gdes,
            lambda: 50.0,
            lr_peak: 5e-4,
            warmup_steps: 100,
            max_steps: 2000,
            batch_size: 32,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-6,
            grad_clip_norm: 1.0,
            seed: 1,
            mask: MaskPolicy::default(),
            temperature: 1.0,
            gen,
            disc,
            max_seq_len: 64,
            vocab_target: 512,
            corpus_tokens: 30_000,
            mlm_tied: true,
            decay_e_delta: true,
            allow_shape_override: false,
            precision: Dtype::F32,
            diag_every: 200,
            checkpoint_every: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::config("lambda", "must be nonnegative"));
        }
        if self.warmup_steps > self.max_steps {
            return Err(Error::config(
                "warmup_steps",
                format!("{} exceeds max_steps {}", self.warmup_steps, self.max_steps),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature", "must be positive"));
        }
        if self.lr_peak < 0.0 {
            return Err(Error::config("lr_peak", "must be nonnegative"));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(Error::config("beta1/beta2", "must lie in [0, 1)"));
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::config("grad_clip_norm", "must be positive"));
        }
        if self.max_seq_len < 3 {
            return Err(Error::config("max_seq_len", "needs room for CLS, one token, SEP"));
        }
        if self.vocab_target == 0 {
            return Err(Error::config("vocab_target", "must be positive"));
        }
        if self.corpus_tokens == 0 {
            return Err(Error::config("corpus_tokens", "must be positive"));
        }
        self.mask.validate()?;
        self.gen.validate()?;
        self.disc.validate()?;
        if self.gen.hidden != self.disc.hidden && !self.allow_shape_override {
            return Err(Error::config(
                "gen.hidden",
                format!("{} differs from discriminator hidden {}", self.gen.hidden, self.disc.hidden),
            ));
        }
        let expected = expected_generator_depth(self.disc.n_layers);
        if self.gen.n_layers != expected && !self.allow_shape_override {
            return Err(Error::config(
                "gen.n_layers",
                format!(
                    "{} but the depth convention wants {expected} for a {}-layer discriminator (set allow_shape_override to bypass)",
                    self.gen.n_layers, self.disc.n_layers
                ),
            ));
        }
        Ok(())
    }

    /// Flat key=value form, one pair per field. `{:?}` on floats prints the
    /// shortest string that parses back to the same bits, so a config survives
    /// a text round trip unchanged.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| kv.push((k.to_string(), v));
        put("mode", self.mode.name().to_string());
        put("lambda", format!("{:?}", self.lambda));
        put("lr_peak", format!("{:?}", self.lr_peak));
        put("warmup_steps", self.warmup_steps.to_string());
        put("max_steps", self.max_steps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("weight_decay", format!("{:?}", self.weight_decay));
        put("beta1", format!("{:?}", self.beta1));
        put("beta2", format!("{:?}", self.beta2));
        put("adam_eps", format!("{:?}", self.adam_eps));
        put("grad_clip_norm", format!("{:?}", self.grad_clip_norm));
        put("seed", self.seed.to_string());
        put("mask_rate", format!("{:?}", self.mask.mask_rate));
        put("mask_p_mask", format!("{:?}", self.mask.p_mask));
        put("mask_p_random", format!("{:?}", self.mask.p_random));
        put("mask_p_keep", format!("{:?}", self.mask.p_keep));
        put("mask_min_one", self.mask.min_one.to_string());
        put("temperature", format!("{:?}", self.temperature));
        for (prefix, enc) in [("gen", &self.gen), ("disc", &self.disc)] {
            put(&format!("{prefix}.n_layers"), enc.n_layers.to_string());
            put(&format!("{prefix}.hidden"), enc.hidden.to_string());
            put(&format!("{prefix}.n_heads"), enc.n_heads.to_string());
            put(&format!("{prefix}.ffn_inner"), enc.ffn_inner.to_string());
            put(&format!("{prefix}.max_rel_distance"), enc.max_rel_distance.to_string());
            put(&format!("{prefix}.attention"), enc.attention_mode.name().to_string());
            put(&format!("{prefix}.dropout"), format!("{:?}", enc.dropout));
        }
        put("max_seq_len", self.max_seq_len.to_string());
        put("vocab_target", self.vocab_target.to_string());
        put("corpus_tokens", self.corpus_tokens.to_string());
        put("mlm_tied", self.mlm_tied.to_string());
        put("decay_e_delta", self.decay_e_delta.to_string());
        put("allow_shape_override", self.allow_shape_override.to_string());
        put("precision", self.precision.name().to_string());
        put("diag_every", self.diag_every.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        kv
    }

    /// Sets one field from its key=value form. Unknown keys are an error so a
    /// typo in a config file cannot silently fall back to a default.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::config(key, format!("expected true or false, got {value:?}"))),
            }
        }
        if let Some(rest) = key.strip_prefix("gen.").map(str::to_string) {
            return Self::apply_encoder_kv(&mut self.gen, key, &rest, value);
        }
        if let Some(rest) = key.strip_prefix("disc.").map(str::to_string) {
            return Self::apply_encoder_kv(&mut self.disc, key, &rest, value);
        }
        match key {
            "mode" => self.mode = SharingMode::parse(value)?,
            "lambda" => self.lambda = num(key, value)?,
            "lr_peak" => self.lr_peak = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "mask_rate" => self.mask.mask_rate = num(key, value)?,
            "mask_p_mask" => self.mask.p_mask = num(key, value)?,
            "mask_p_random" => self.mask.p_random = num(key, value)?,
            "mask_p_keep" => self.mask.p_keep = num(key, value)?,
            "mask_min_one" => self.mask.min_one = flag(key, value)?,
            "temperature" => self.temperature = num(key, value)?,
            "max_seq_len" => self.max_seq_len = num(key, value)?,
            "vocab_target" => self.vocab_target = num(key, value)?,
            "corpus_tokens" => self.corpus_tokens = num(key, value)?,
            "mlm_tied" => self.mlm_tied = flag(key, value)?,
            "decay_e_delta" => self.decay_e_delta = flag(key, value)?,
            "allow_shape_override" => self.allow_shape_override = flag(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Dtype::F32,
                    "f64" => Dtype::F64,
                    _ => return Err(Error::config(key, format!("expected f32 or f64, got {value:?}"))),
                }
            }
            "diag_every" => self.diag_every = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    fn apply_encoder_kv(enc: &mut EncoderConfig, key: &str, field: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
        }
        match field {
            "n_layers" => enc.n_layers = num(key, value)?,
            "hidden" => enc.hidden = num(key, value)?,
            "n_heads" => enc.n_heads = num(key, value)?,
            "ffn_inner" => enc.ffn_inner = num(key, value)?,
            "max_rel_distance" => enc.max_rel_distance = num(key, value)?,
            "attention" => enc.attention_mode = AttentionMode::parse(value)?,
            "dropout" => enc.dropout = num(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Rebuilds a config from `to_kv` output (or any key=value pairs layered
    /// over the desk defaults). Validates the result.
    pub fn from_kv<'a, I>(pairs: I) -> Result<TrainConfig>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut cfg = TrainConfig::desk_defaults();
        for (k, v) in pairs {
            cfg.apply_kv(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
