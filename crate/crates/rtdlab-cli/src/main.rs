//! rtdlab command line: pre-train under one sharing mode, compare modes with
//! aligned seeds, inspect checkpoints, fine-tune, and re-export
//! discriminators.
//!
//! Configuration precedence is flags > config file > desk defaults. Every
//! training run leaves a manifest.txt holding the fully resolved config, the
//! tool version, and the artifact list, so a report can be reproduced from
//! the manifest alone.
//!
//! Exit codes: 0 ok, 1 internal error, 2 invalid config or request,
//! 3 training diverged, 4 I/O failure, 5 unreadable or wrong-kind checkpoint.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rtdlab::diagnostics::{cosine_report, curve_capture, interference_probe, CosineReport, CurveSeries};
use rtdlab::encoder::AttentionMode;
use rtdlab::finetune::{compare_modes, finetune, make_task};
use rtdlab::pretrain::{
    bundle_from_checkpoint, corpus_and_vocab, export_discriminator, load_checkpoint, pretrain,
    LoadedCheckpoint, RunArtifacts, StepBatch, TrainConfig,
};
use rtdlab::{Dtype, Error, ExperimentConfig, Real, Result, SharingMode, StreamSeeds};

#[derive(Parser)]
#[command(name = "rtdlab", version, about = "Desk-scale replaced-token-detection laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train one generator/discriminator pair
    Pretrain(PretrainOpts),
    /// Pre-train several sharing modes with aligned seeds and build a report
    Compare(CompareOpts),
    /// Print embedding similarity statistics for a training checkpoint
    Diagnose(DiagnoseOpts),
    /// Fine-tune a checkpointed discriminator on the topic task
    Finetune(FinetuneOpts),
    /// Re-emit the standalone discriminator from a training checkpoint
    Export(ExportOpts),
}

/// Flags shared by the training-style subcommands.
#[derive(Args)]
struct CommonOpts {
    /// Flat key=value config file layered over the desk defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed (aligned across modes in compare)
    #[arg(long)]
    seed: Option<u64>,
    /// Total optimizer steps; warmup shrinks to fit a shorter run
    #[arg(long)]
    steps: Option<u64>,
    /// Weight of the replaced-token-detection loss
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Attention flavor for both encoders: standard or disentangled
    #[arg(long)]
    attention: Option<String>,
}

#[derive(Args)]
struct PretrainOpts {
    #[command(flatten)]
    common: CommonOpts,
    /// Sharing mode: es, nes, or gdes
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct CompareOpts {
    #[command(flatten)]
    common: CommonOpts,
    /// Comma-separated sharing modes to train
    #[arg(long, value_delimiter = ',', default_value = "es,nes,gdes")]
    modes: Vec<String>,
}

#[derive(Args)]
struct DiagnoseOpts {
    /// Full training checkpoint to inspect
    checkpoint: PathBuf,
    /// Config file; only cosine_fraction and ft.* keys matter here
    #[arg(long)]
    config: Option<PathBuf>,
    /// Row fraction for the similarity statistic; 1.0 scores every row
    #[arg(long)]
    fraction: Option<f64>,
    /// RNG seed for row subsampling (default: the checkpoint's own)
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the report to this file
    #[arg(long)]
    out: Option<PathBuf>,
    /// Measure MLM/RTD gradient interference on a fresh batch
    #[arg(long)]
    probe: bool,
}

#[derive(Args)]
struct FinetuneOpts {
    /// Discriminator checkpoint, exported or full
    checkpoint: PathBuf,
    /// Config file; ft.* keys control the fine-tune run
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fine-tune seed (task sampling, shuffling, head init)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportOpts {
    /// Full training checkpoint to fold down
    checkpoint: PathBuf,
    /// Output path for the standalone discriminator
    #[arg(long, default_value = "export.ckpt")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(opts) => cmd_pretrain(opts),
        Command::Compare(opts) => cmd_compare(opts),
        Command::Diagnose(opts) => cmd_diagnose(opts),
        Command::Finetune(opts) => cmd_finetune(opts),
        Command::Export(opts) => cmd_export(opts),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_for(&err))
        }
    }
}

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Config { .. }
        | Error::UnknownGrammar(_)
        | Error::Vocab(_)
        | Error::Corpus(_)
        | Error::Diagnostics(_)
        | Error::Finetune(_) => 2,
        Error::Diverged { .. } => 3,
        Error::Io(_) => 4,
        Error::Checkpoint(_) => 5,
        _ => 1,
    }
}

/// Desk defaults, then the config file, then the flags. Validated as a whole.
fn resolve(common: &CommonOpts, mode: Option<&str>) -> Result<ExperimentConfig> {
    let mut exp = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::desk_defaults(),
    };
    if let Some(m) = mode {
        exp.train.mode = SharingMode::parse(m)?;
    }
    if let Some(s) = common.seed {
        exp.train.seed = s;
    }
    if let Some(n) = common.steps {
        exp.train.max_steps = n;
        // The flag truncates a run; warmup follows it down instead of
        // tripping the warmup<=steps validation.
        exp.train.warmup_steps = exp.train.warmup_steps.min(n);
    }
    if let Some(l) = common.lambda {
        exp.train.lambda = l;
    }
    if let Some(a) = &common.attention {
        let flavor = AttentionMode::parse(a)?;
        exp.train.gen.attention_mode = flavor;
        exp.train.disc.attention_mode = flavor;
    }
    if let Some(o) = &common.out {
        exp.out_dir = o.clone();
    }
    exp.validate()?;
    Ok(exp)
}

fn write_manifest(
    dir: &Path,
    command: &str,
    extras: &[(&str, String)],
    exp: &ExperimentConfig,
    artifacts: &[String],
) -> Result<()> {
    let mut text = format!("tool=rtdlab {}\ncommand={command}\n", env!("CARGO_PKG_VERSION"));
    for (k, v) in extras {
        text.push_str(&format!("{k}={v}\n"));
    }
    text.push_str(&exp.to_kv_text());
    for a in artifacts {
        text.push_str(&format!("artifact={a}\n"));
    }
    std::fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

/// Path relative to the report root, for manifest artifact lines.
fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().into_owned()
}

fn run_artifact_list(art: &RunArtifacts, base: &Path) -> Vec<String> {
    let mut list = vec![
        rel(&art.metrics_csv, base),
        rel(&art.cosine_csv, base),
        rel(&art.init_checkpoint, base),
        rel(&art.final_checkpoint, base),
    ];
    if let Some(svg) = &art.curve_svg {
        list.push(rel(&svg.with_extension("csv"), base));
        list.push(rel(svg, base));
    }
    if let Some(export) = &art.export {
        list.push(rel(export, base));
    }
    list
}

fn smoothing_window(max_steps: u64) -> usize {
    (max_steps / 20).clamp(1, 50) as usize
}

fn cmd_pretrain(opts: &PretrainOpts) -> Result<()> {
    let exp = resolve(&opts.common, opts.mode.as_deref())?;
    std::fs::create_dir_all(&exp.out_dir)?;
    // Written up front so even a diverged run leaves its resolved config.
    write_manifest(&exp.out_dir, "pretrain", &[], &exp, &[])?;
    let art = match exp.train.precision {
        Dtype::F32 => pretrain::<f32>(&exp.train, &exp.out_dir)?,
        Dtype::F64 => pretrain::<f64>(&exp.train, &exp.out_dir)?,
    };
    let artifacts = run_artifact_list(&art, &exp.out_dir);
    write_manifest(&exp.out_dir, "pretrain", &[], &exp, &artifacts)?;
    println!(
        "pre-trained mode={} seed={} steps={} vocab={}",
        exp.train.mode.name(),
        exp.train.seed,
        exp.train.max_steps,
        art.vocab_size
    );
    if let Some(last) = art.metrics.last() {
        println!(
            "final step {}: loss_mlm={:.4} loss_rtd={:.4} grad_norm_G={:.3} grad_norm_D={:.3}",
            last.step, last.loss_mlm, last.loss_rtd, last.grad_norm_g, last.grad_norm_d
        );
    }
    println!("artifacts in {}", exp.out_dir.display());
    Ok(())
}

fn cmd_compare(opts: &CompareOpts) -> Result<()> {
    let exp = resolve(&opts.common, None)?;
    let mut modes = Vec::new();
    for name in &opts.modes {
        let mode = SharingMode::parse(name)?;
        if modes.contains(&mode) {
            return Err(Error::config("modes", format!("{} listed twice", mode.name())));
        }
        modes.push(mode);
    }
    if modes.is_empty() {
        return Err(Error::config("modes", "need at least one mode"));
    }
    std::fs::create_dir_all(&exp.out_dir)?;
    let mode_list = modes.iter().map(|m| m.name()).collect::<Vec<_>>().join(",");
    let extras = [("modes", mode_list)];
    write_manifest(&exp.out_dir, "compare", &extras, &exp, &[])?;
    let artifacts = match exp.train.precision {
        Dtype::F32 => compare_runs::<f32>(&exp, &modes)?,
        Dtype::F64 => compare_runs::<f64>(&exp, &modes)?,
    };
    write_manifest(&exp.out_dir, "compare", &extras, &exp, &artifacts)?;
    println!("report in {}", exp.out_dir.display());
    Ok(())
}

fn compare_runs<F: Real>(exp: &ExperimentConfig, modes: &[SharingMode]) -> Result<Vec<String>> {
    let base = &exp.out_dir;
    let mut artifacts = Vec::new();
    let mut series = Vec::new();
    let mut export_paths = Vec::new();

    for &mode in modes {
        let mut cfg = exp.train.clone();
        cfg.mode = mode;
        let dir = base.join(mode.name());
        println!("[{}] pre-training {} steps, seed {}", mode.name(), cfg.max_steps, cfg.seed);
        let art = pretrain::<F>(&cfg, &dir)?;
        series.push(CurveSeries {
            label: mode.name().to_string(),
            steps: art.metrics.iter().map(|r| r.step).collect(),
            values: art.metrics.iter().map(|r| r.loss_mlm).collect(),
        });

        let ck = load_checkpoint(&art.final_checkpoint)?;
        let bundle = bundle_from_checkpoint::<F>(&ck)?;
        let report = cosine_report(&bundle, exp.cosine_fraction, cfg.seed)?;
        let report_path = base.join(format!("cosine-{}.txt", mode.name()));
        std::fs::write(&report_path, cosine_text(&report))?;

        artifacts.extend(run_artifact_list(&art, base));
        artifacts.push(rel(&report_path, base));
        if let Some(path) = &art.export {
            export_paths.push((mode, path.clone()));
        }
    }

    // Zero-step runs have no metrics rows, hence nothing to plot.
    if series.iter().all(|s| !s.values.is_empty()) {
        let csv = base.join("curves.csv");
        let svg = base.join("curves.svg");
        curve_capture(&series, smoothing_window(exp.train.max_steps), &csv, &svg)?;
        artifacts.push(rel(&csv, base));
        artifacts.push(rel(&svg, base));
    }

    if export_paths.len() >= 2 {
        let loaded: Vec<(String, LoadedCheckpoint)> = export_paths
            .iter()
            .map(|(mode, path)| Ok((mode.name().to_string(), load_checkpoint(path)?)))
            .collect::<Result<_>>()?;
        let refs: Vec<(String, &LoadedCheckpoint)> =
            loaded.iter().map(|(name, ck)| (name.clone(), ck)).collect();
        let first = &loaded[0].1;
        let task = make_task(
            "default",
            exp.finetune.seed,
            exp.ft_examples,
            &first.vocab,
            first.config.max_seq_len,
        )?;
        let comparison = compare_modes::<F>(&refs, &task, &exp.finetune, exp.ft_seeds)?;
        for summary in &comparison.summary {
            println!(
                "[{}] fine-tune accuracy over {} seeds: mean {:.4}, sd {:.4}",
                summary.mode, summary.n, summary.mean, summary.sd
            );
        }
        let csv = base.join("finetune.csv");
        std::fs::write(&csv, comparison.to_csv())?;
        artifacts.push(rel(&csv, base));
    } else {
        println!("fine-tune comparison skipped: it needs two exported discriminators");
    }
    Ok(artifacts)
}

fn cosine_text(report: &CosineReport) -> String {
    let mut text = report.to_kv_text();
    text.push_str(if report.sample_fraction >= 1.0 {
        "sampling=exhaustive\n"
    } else {
        "sampling=row-subset\n"
    });
    text
}

fn cmd_diagnose(opts: &DiagnoseOpts) -> Result<()> {
    let mut exp = match &opts.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::desk_defaults(),
    };
    if let Some(f) = opts.fraction {
        exp.cosine_fraction = f;
    }
    if !(exp.cosine_fraction > 0.0 && exp.cosine_fraction <= 1.0) {
        return Err(Error::config("fraction", "must lie in (0, 1]"));
    }
    let ck = load_checkpoint(&opts.checkpoint)?;
    let seed = opts.seed.unwrap_or(ck.config.seed);
    let text = match ck.config.precision {
        Dtype::F32 => diagnose_text::<f32>(&ck, exp.cosine_fraction, seed, opts.probe)?,
        Dtype::F64 => diagnose_text::<f64>(&ck, exp.cosine_fraction, seed, opts.probe)?,
    };
    print!("{text}");
    if let Some(out) = &opts.out {
        std::fs::write(out, &text)?;
    }
    Ok(())
}

fn diagnose_text<F: Real>(
    ck: &LoadedCheckpoint,
    fraction: f64,
    seed: u64,
    probe: bool,
) -> Result<String> {
    let bundle = bundle_from_checkpoint::<F>(ck)?;
    let report = cosine_report(&bundle, fraction, seed)?;
    let mut text = format!("step={}\n", ck.step);
    text.push_str(&cosine_text(&report));
    if probe {
        text.push_str(&probe_text(&bundle, &ck.config, ck.step)?);
    }
    Ok(text)
}

fn probe_text<F: Real>(
    bundle: &rtdlab::pretrain::ModelBundle<F>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<String> {
    let (vocab, docs) = corpus_and_vocab(cfg)?;
    let seeds = StreamSeeds::new(cfg.seed);
    let batch = StepBatch::build(&docs, cfg, vocab.len(), &seeds, step)?;
    let probe = interference_probe(bundle, cfg, &batch, &seeds, step, cfg.lambda)?;
    let angle = probe
        .cos_angle
        .map_or_else(|| "absent".to_string(), |c| format!("{c:?}"));
    Ok(format!(
        "probe_cos_angle={angle}\nprobe_norm_mlm={:?}\nprobe_norm_rtd={:?}\n",
        probe.norm_mlm, probe.norm_rtd
    ))
}

fn cmd_finetune(opts: &FinetuneOpts) -> Result<()> {
    let mut exp = match &opts.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::desk_defaults(),
    };
    if let Some(s) = opts.seed {
        exp.finetune.seed = s;
    }
    if let Some(o) = &opts.out {
        exp.out_dir = o.clone();
    }
    exp.validate()?;

    let ck = load_checkpoint(&opts.checkpoint)?;
    let task = make_task(
        "default",
        exp.finetune.seed,
        exp.ft_examples,
        &ck.vocab,
        ck.config.max_seq_len,
    )?;
    std::fs::create_dir_all(&exp.out_dir)?;
    let extras = [("checkpoint", opts.checkpoint.display().to_string())];
    write_manifest(&exp.out_dir, "finetune", &extras, &exp, &[])?;

    let dev_by_epoch = match ck.config.precision {
        Dtype::F32 => finetune::<f32>(&ck, &task, &exp.finetune)?.dev_by_epoch,
        Dtype::F64 => finetune::<f64>(&ck, &task, &exp.finetune)?.dev_by_epoch,
    };
    let mut best = (1usize, f64::NEG_INFINITY);
    let mut csv = String::from("epoch,dev_accuracy\n");
    for (idx, acc) in dev_by_epoch.iter().enumerate() {
        csv.push_str(&format!("{},{:?}\n", idx + 1, acc));
        if *acc > best.1 {
            best = (idx + 1, *acc);
        }
    }
    let csv_path = exp.out_dir.join("finetune.csv");
    std::fs::write(&csv_path, csv)?;
    write_manifest(&exp.out_dir, "finetune", &extras, &exp, &[rel(&csv_path, &exp.out_dir)])?;
    println!(
        "fine-tuned {} epochs on {} train / {} dev examples",
        dev_by_epoch.len(),
        task.train.len(),
        task.dev.len()
    );
    println!("best epoch {} with dev accuracy {:.4}", best.0, best.1);
    Ok(())
}

fn cmd_export(opts: &ExportOpts) -> Result<()> {
    let ck = load_checkpoint(&opts.checkpoint)?;
    match ck.config.precision {
        Dtype::F32 => reexport::<f32>(&ck, &opts.out)?,
        Dtype::F64 => reexport::<f64>(&ck, &opts.out)?,
    }
    println!("wrote {}", opts.out.display());
    Ok(())
}

fn reexport<F: Real>(ck: &LoadedCheckpoint, out: &Path) -> Result<()> {
    let bundle = bundle_from_checkpoint::<F>(ck)?;
    export_discriminator(&bundle, &ck.config, ck.step, out)
}
