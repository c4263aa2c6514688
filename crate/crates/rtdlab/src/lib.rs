//! rtdlab: a desk-scale laboratory for replaced-token-detection (RTD)
//! pre-training.
//!
//! A small generator learns masked-language modeling, a discriminator learns
//! to spot replaced tokens, and the two share token embeddings under one of
//! three regimes:
//!
//! * `es`   - a single shared table; both losses update it jointly.
//! * `nes`  - separate generator/discriminator tables, alternating updates.
//! * `gdes` - the discriminator sees `stop_gradient(E_G) + E_delta`, so the
//!   RTD loss can adapt the discriminator's view without ever back-feeding
//!   the generator's table.
//!
//! Everything runs on a purpose-built reverse-mode tape ([`autodiff`]) so the
//! gradient-flow claims behind those regimes are checkable properties rather
//! than folklore: see [`autodiff::grad_check`], the zero-flow tests on GDES,
//! and the trajectory-equivalence tests between NES and GDES generators.

pub mod autodiff;
pub mod config;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod pretrain;
pub mod real;
pub mod rng;
pub mod text;

pub use autodiff::{grad_check, GradCheckReport, Tape, Tensor};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use pretrain::SharingMode;
pub use real::{Dtype, Real};
pub use rng::StreamSeeds;
