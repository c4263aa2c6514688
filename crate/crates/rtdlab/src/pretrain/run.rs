//! The pre-training run loop: corpus synthesis, vocabulary induction,
//! per-step metrics streaming, periodic checkpoints and diagnostics, and the
//! final discriminator export.
//!
//! All floats in CSV output are printed with `{:?}` (shortest round-trip
//! form), so equal seeds produce byte-identical files.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::diagnostics::{cosine_report, curve_capture, CurveSeries};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::StreamSeeds;
use crate::text::{build_vocab, corpus_synth, encode_sequence, TokenSequence, Vocab};

use super::checkpoint::{save_checkpoint, CheckpointKind};
use super::model::ModelBundle;
use super::steps::{MetricsRecord, Trainer};
use super::{SharingMode, TrainConfig};

pub const METRICS_HEADER: &str = "step,loss_mlm,loss_rtd,lr,grad_norm_G,grad_norm_D";
pub const COSINE_HEADER: &str = "step,mode,seed,sim_e_g,sim_e_d,sim_e_delta";

/// Where a finished (or zero-step) run left its files.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics: Vec<MetricsRecord>,
    pub metrics_csv: PathBuf,
    pub cosine_csv: PathBuf,
    pub curve_svg: Option<PathBuf>,
    pub init_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    /// Absent for zero-step runs, which emit the init checkpoint only.
    pub export: Option<PathBuf>,
    pub vocab_size: usize,
}

fn metrics_row(rec: &MetricsRecord) -> String {
    format!(
        "{},{:?},{:?},{:?},{:?},{:?}",
        rec.step, rec.loss_mlm, rec.loss_rtd, rec.lr, rec.grad_norm_g, rec.grad_norm_d
    )
}

fn cosine_row<F: Real>(bundle: &ModelBundle<F>, step: u64, seed: u64) -> Result<String> {
    let rep = cosine_report(bundle, 1.0, seed)?;
    fn cell(v: Option<f64>) -> String {
        v.map_or_else(String::new, |x| format!("{x:?}"))
    }
    Ok(format!(
        "{step},{},{seed},{},{},{}",
        rep.mode.name(),
        cell(rep.sim_e_g),
        cell(rep.sim_e_d),
        cell(rep.sim_e_delta)
    ))
}

/// Builds the synthetic corpus and its vocabulary for a config. The corpus
/// seed comes from the run's own stream family, so changing the master seed
/// changes the text.
pub fn corpus_and_vocab(cfg: &TrainConfig) -> Result<(Vocab, Vec<TokenSequence>)> {
    let seeds = StreamSeeds::new(cfg.seed);
    let corpus = corpus_synth(seeds.seed("corpus"), cfg.corpus_tokens, "default")?;
    let vocab = build_vocab(&corpus, cfg.vocab_target)?;
    let docs = corpus.lines().map(|l| encode_sequence(&vocab, l, cfg.max_seq_len)).collect();
    Ok((vocab, docs))
}

/// Writes the discriminator as a standalone checkpoint. For gdes the stored
/// table is e_g + e_delta, summed elementwise in the run's own precision;
/// for es it is a copy of the shared table.
pub fn export_discriminator<F: Real>(
    bundle: &ModelBundle<F>,
    cfg: &TrainConfig,
    step: u64,
    path: &Path,
) -> Result<()> {
    let table = match bundle.mode {
        SharingMode::Es => bundle.e_g.detached_copy(),
        SharingMode::Nes => bundle.e_d.as_ref().expect("nes has e_d").detached_copy(),
        SharingMode::Gdes => {
            let delta = bundle.e_delta.as_ref().expect("gdes has e_delta");
            let folded: Vec<F> = bundle
                .e_g
                .values()
                .iter()
                .zip(delta.values().iter())
                .map(|(&a, &b)| a + b)
                .collect();
            Tensor::from_vec(folded, bundle.e_g.shape())?
        }
    };
    let mut params = vec![("e_d".to_string(), table)];
    bundle.disc_body.named_params("disc", &mut params);
    bundle.rtd.named_params("rtd", &mut params);
    save_checkpoint(path, CheckpointKind::DiscriminatorExport, step, cfg, &bundle.vocab, &params)
}

/// Runs pre-training end to end, writing artifacts under `out_dir`:
/// metrics.csv, cosine.csv, init/final checkpoints, periodic step
/// checkpoints, the discriminator export, and a smoothed loss-curve SVG.
pub fn pretrain<F: Real>(cfg: &TrainConfig, out_dir: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let (vocab, docs) = corpus_and_vocab(cfg)?;
    let vocab_size = vocab.len();
    let mut trainer = Trainer::<F>::new(cfg.clone(), vocab, docs)?;

    let init_checkpoint = out_dir.join("init.ckpt");
    save_checkpoint(
        &init_checkpoint,
        CheckpointKind::Bundle,
        0,
        cfg,
        &trainer.bundle.vocab,
        &trainer.bundle.named_params(),
    )?;

    let metrics_csv = out_dir.join("metrics.csv");
    let mut metrics_file = File::create(&metrics_csv)?;
    writeln!(metrics_file, "{METRICS_HEADER}")?;

    let cosine_csv = out_dir.join("cosine.csv");
    let mut cosine_file = File::create(&cosine_csv)?;
    writeln!(cosine_file, "{COSINE_HEADER}")?;
    writeln!(cosine_file, "{}", cosine_row(&trainer.bundle, 0, cfg.seed)?)?;

    if cfg.max_steps == 0 {
        return Ok(RunArtifacts {
            metrics: Vec::new(),
            metrics_csv,
            cosine_csv,
            curve_svg: None,
            final_checkpoint: init_checkpoint.clone(),
            init_checkpoint,
            export: None,
            vocab_size,
        });
    }

    let mut metrics = Vec::with_capacity(cfg.max_steps as usize);
    while trainer.step < cfg.max_steps {
        let rec = match trainer.train_step() {
            Ok(rec) => rec,
            Err(e @ Error::Diverged { .. }) => {
                let mut dump = String::new();
                writeln!(dump, "{e}").expect("string write");
                writeln!(dump, "last steps:").expect("string write");
                for r in metrics.iter().rev().take(5) {
                    writeln!(dump, "{}", metrics_row(r)).expect("string write");
                }
                std::fs::write(out_dir.join("divergence.txt"), dump)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(metrics_file, "{}", metrics_row(&rec))?;
        metrics.push(rec);

        let done = trainer.step == cfg.max_steps;
        if cfg.diag_every > 0 && (trainer.step % cfg.diag_every == 0 || done) {
            writeln!(cosine_file, "{}", cosine_row(&trainer.bundle, trainer.step, cfg.seed)?)?;
        }
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 && !done {
            save_checkpoint(
                &out_dir.join(format!("step{:06}.ckpt", trainer.step)),
                CheckpointKind::Bundle,
                trainer.step,
                cfg,
                &trainer.bundle.vocab,
                &trainer.bundle.named_params(),
            )?;
        }
    }
    metrics_file.flush()?;
    cosine_file.flush()?;

    let final_checkpoint = out_dir.join("final.ckpt");
    save_checkpoint(
        &final_checkpoint,
        CheckpointKind::Bundle,
        trainer.step,
        cfg,
        &trainer.bundle.vocab,
        &trainer.bundle.named_params(),
    )?;
    let export = out_dir.join("export.ckpt");
    export_discriminator(&trainer.bundle, cfg, trainer.step, &export)?;

    let curve_svg = out_dir.join("loss_curve.svg");
    let window = (cfg.max_steps / 20).clamp(1, 50) as usize;
    curve_capture(
        &[CurveSeries {
            label: format!("{} mlm", cfg.mode.name()),
            steps: metrics.iter().map(|r| r.step).collect(),
            values: metrics.iter().map(|r| r.loss_mlm).collect(),
        }],
        window,
        &out_dir.join("loss_curve.csv"),
        &curve_svg,
    )?;

    Ok(RunArtifacts {
        metrics,
        metrics_csv,
        cosine_csv,
        curve_svg: Some(curve_svg),
        init_checkpoint,
        final_checkpoint,
        export: Some(export),
        vocab_size,
    })
}
