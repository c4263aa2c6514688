//! Downstream classification on top of a pre-trained discriminator: a linear
//! head over the CLS hidden state, full-model AdamW fine-tuning, and a
//! per-mode comparison harness.
//!
//! The task is topic classification over the synthetic grammar. Topic
//! vocabulary barely overlaps between classes, so the task is close to
//! linearly separable from surface features and a small encoder can lift a
//! random head well above chance within a few epochs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::encoder::{const_param, gaussian_param, EncoderConfig, INIT_STD};
use crate::error::{Error, Result};
use crate::pretrain::{
    adamw_update, decay_flags, discriminator_view, AdamHyper, DiscriminatorView, LoadedCheckpoint,
    OptimizerState,
};
use crate::real::Real;
use crate::rng::StreamSeeds;
use crate::text::{encode_sequence, pad_batch, synth_docs, TokenSequence, Vocab, N_TOPICS};

/// Labeled examples with a fixed train/dev split. The vocabulary used for
/// encoding rides along so a fine-tune run can verify it matches the
/// checkpoint it is about to train.
#[derive(Debug, Clone)]
pub struct ClassificationTask {
    pub n_classes: usize,
    pub vocab: Vocab,
    pub train: Vec<(TokenSequence, usize)>,
    pub dev: Vec<(TokenSequence, usize)>,
}

/// Deterministic topic-classification task. Documents come from the labeled
/// grammar; every fifth example lands in dev, the rest in train. Topics
/// rotate round-robin upstream, so both splits stay class-balanced.
pub fn make_task(
    grammar_id: &str,
    seed: u64,
    n_examples: usize,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<ClassificationTask> {
    if n_examples < 10 {
        return Err(Error::config("n_examples", "need at least 10 examples to split"));
    }
    // synth_docs takes a token budget, not a document count; overshoot and
    // trim. Trimming a round-robin stream skews any class count by at most 1.
    let mut budget = n_examples * 20;
    let mut docs = synth_docs(seed, budget, grammar_id)?;
    while docs.len() < n_examples {
        budget *= 2;
        docs = synth_docs(seed, budget, grammar_id)?;
    }
    docs.truncate(n_examples);

    let mut train = Vec::new();
    let mut dev = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        let ex = (encode_sequence(vocab, &d.text, max_seq_len), d.topic);
        if i % 5 == 4 {
            dev.push(ex);
        } else {
            train.push(ex);
        }
    }
    Ok(ClassificationTask { n_classes: N_TOPICS, vocab: vocab.clone(), train, dev })
}

/// Schema of a fine-tuning run: learning rate, epochs, batch size, dropout
/// on the pooled CLS state, and the run seed.
#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub head_dropout: f64,
    pub seed: u64,
}

impl FineTuneConfig {
    pub fn desk_defaults() -> Self {
        FineTuneConfig { lr: 1e-3, epochs: 3, batch_size: 16, head_dropout: 0.0, seed: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::config("head_dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// A discriminator with a linear classification head over the CLS position.
pub struct Classifier<F: Real> {
    pub view: DiscriminatorView<F>,
    pub head_w: Tensor<F>,
    pub head_b: Tensor<F>,
}

impl<F: Real> Classifier<F> {
    pub fn init(view: DiscriminatorView<F>, hidden: usize, n_classes: usize, seeds: &StreamSeeds) -> Self {
        Classifier {
            view,
            head_w: gaussian_param(seeds, "head_w", &[hidden, n_classes], INIT_STD),
            head_b: const_param(0.0, &[n_classes]),
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = self.view.named_params();
        out.push(("head_w".to_string(), self.head_w.clone()));
        out.push(("head_b".to_string(), self.head_b.clone()));
        out
    }

    /// Class logits (B, n_classes) for a padded batch.
    pub fn logits<R: rand::Rng>(
        &self,
        tape: &Tape<F>,
        enc_cfg: &EncoderConfig,
        padded: &crate::text::PaddedBatch,
        head_dropout: f64,
        rng: &mut R,
    ) -> Result<Tensor<F>> {
        let h = self.view.encode(tape, enc_cfg, padded, rng)?;
        let hidden = self.head_w.shape()[0];
        let cls = tape.slice(&h, 1, 0, 1)?;
        let cls = tape.reshape(&cls, &[padded.b, hidden])?;
        let cls = if head_dropout > 0.0 { tape.dropout(&cls, head_dropout, rng)? } else { cls };
        let scores = tape.matmul(&cls, &self.head_w)?;
        tape.add(&scores, &self.head_b)
    }
}

/// Dev accuracy of a classifier, dropout off. Argmax ties resolve to the
/// lowest class index.
pub fn evaluate<F: Real>(
    clf: &Classifier<F>,
    enc_cfg: &EncoderConfig,
    examples: &[(TokenSequence, usize)],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Finetune("cannot evaluate on an empty split".into()));
    }
    let eval_cfg = EncoderConfig { dropout: 0.0, ..enc_cfg.clone() };
    let mut correct = 0usize;
    for chunk in examples.chunks(32) {
        let seqs: Vec<TokenSequence> = chunk.iter().map(|(s, _)| s.clone()).collect();
        let padded = pad_batch(&seqs);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = clf.logits(&tape, &eval_cfg, &padded, 0.0, &mut rng)?;
        let vals = logits.to_vec();
        let c = logits.shape()[1];
        for (row, (_, label)) in chunk.iter().enumerate() {
            let scores = &vals[row * c..(row + 1) * c];
            let mut arg = 0usize;
            for (j, v) in scores.iter().enumerate() {
                if v.into_f64() > scores[arg].into_f64() {
                    arg = j;
                }
            }
            if arg == *label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Result of one fine-tune run: the dev trace, the best epoch by dev
/// accuracy (1-based, first epoch wins ties), and the tuned model.
pub struct FineTuneOutcome<F: Real> {
    pub best_dev_accuracy: f64,
    pub best_epoch: usize,
    pub dev_by_epoch: Vec<f64>,
    pub model: Classifier<F>,
}

/// Full-model fine-tuning with AdamW at a constant learning rate. The source
/// checkpoint is read once and never written; the dev split is only ever
/// evaluated, never trained on.
pub fn finetune<F: Real>(
    ck: &LoadedCheckpoint,
    task: &ClassificationTask,
    cfg: &FineTuneConfig,
) -> Result<FineTuneOutcome<F>> {
    cfg.validate()?;
    if task.train.is_empty() || task.dev.is_empty() {
        return Err(Error::Finetune("task has an empty split".into()));
    }
    if ck.vocab != task.vocab {
        return Err(Error::Finetune(
            "task vocabulary does not match the checkpoint vocabulary".into(),
        ));
    }

    let seeds = StreamSeeds::new(cfg.seed);
    let view = discriminator_view::<F>(ck)?;
    let clf = Classifier::init(view, ck.config.disc.hidden, task.n_classes, &seeds);
    let params = clf.named_params();
    let tensors: Vec<Tensor<F>> = params.iter().map(|(_, t)| t.clone()).collect();
    let decay = decay_flags(&params, true);
    let hyper = AdamHyper::default();
    let mut opt = OptimizerState::for_params(&tensors);
    let enc_cfg = ck.config.disc.clone();

    let mut dev_by_epoch = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut global_batch = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        let mut shuffle_rng = seeds.rng_at("shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<TokenSequence> = chunk.iter().map(|&i| task.train[i].0.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| task.train[i].1).collect();
            let padded = pad_batch(&seqs);
            let tape = Tape::new();
            let mut rng = seeds.rng_at("dropout/clf", global_batch);
            let logits = clf.logits(&tape, &enc_cfg, &padded, cfg.head_dropout, &mut rng)?;
            let loss = tape.cross_entropy(&logits, &labels)?;
            if !loss.item().into_f64().is_finite() {
                return Err(Error::Diverged {
                    step: global_batch as usize,
                    what: "classification loss".into(),
                });
            }
            for (_, p) in &params {
                p.zero_grad();
            }
            tape.backward(&loss)?;
            adamw_update(&tensors, &decay, &mut opt, &hyper, cfg.lr)?;
            global_batch += 1;
        }
        let acc = evaluate(&clf, &enc_cfg, &task.dev)?;
        dev_by_epoch.push(acc);
        if acc > best_acc {
            best_acc = acc;
            best_epoch = epoch + 1;
        }
    }
    Ok(FineTuneOutcome { best_dev_accuracy: best_acc, best_epoch, dev_by_epoch, model: clf })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub mode: String,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeSummary {
    pub mode: String,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub summary: Vec<ModeSummary>,
}

impl Comparison {
    /// One row per run, then per mode a `mean` and an `sd` row in the seed
    /// column. Floats print in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,seed,accuracy\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:?}\n", r.mode, r.seed, r.accuracy));
        }
        for s in &self.summary {
            out.push_str(&format!("{},mean,{:?}\n", s.mode, s.mean));
            out.push_str(&format!("{},sd,{:?}\n", s.mode, s.sd));
        }
        out
    }
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Fine-tunes each checkpoint `n_seeds` times on the same task with aligned
/// seeds (base seed, base+1, ...) and tabulates per-mode accuracy.
pub fn compare_modes<F: Real>(
    checkpoints: &[(String, &LoadedCheckpoint)],
    task: &ClassificationTask,
    cfg: &FineTuneConfig,
    n_seeds: usize,
) -> Result<Comparison> {
    if checkpoints.len() < 2 {
        return Err(Error::Finetune("need at least two checkpoints to compare".into()));
    }
    if n_seeds == 0 {
        return Err(Error::config("n_seeds", "must be positive"));
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (mode, ck) in checkpoints {
        let mut accs = Vec::with_capacity(n_seeds);
        for k in 0..n_seeds {
            let run_cfg = FineTuneConfig { seed: cfg.seed + k as u64, ..cfg.clone() };
            let out = finetune::<F>(ck, task, &run_cfg)?;
            rows.push(ComparisonRow {
                mode: mode.clone(),
                seed: run_cfg.seed,
                accuracy: out.best_dev_accuracy,
            });
            accs.push(out.best_dev_accuracy);
        }
        let (mean, sd) = mean_sd(&accs);
        summary.push(ModeSummary { mode: mode.clone(), n: n_seeds, mean, sd });
    }
    Ok(Comparison { rows, summary })
}
