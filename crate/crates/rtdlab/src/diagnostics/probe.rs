//! Gradient-interference probe: how aligned are the MLM and RTD gradients
//! on the shared embedding table?
//!
//! Two independent backward passes over the same batch produce the two task
//! gradients. For es they both land on the shared table; for gdes the RTD
//! gradient is read off e_delta, which is exactly what the RTD task would
//! have pushed into a shared table. nes keeps no shared table, so the probe
//! refuses it.

use crate::error::{Error, Result};
use crate::pretrain::{build_disc_side, build_gen_side, ModelBundle, SharingMode, StepBatch, TrainConfig};
use crate::autodiff::Tape;
use crate::real::Real;
use crate::rng::StreamSeeds;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterferenceProbe {
    pub step: u64,
    /// Absent when either task gradient has zero norm.
    pub cos_angle: Option<f64>,
    pub norm_mlm: f64,
    /// Norm of the lambda-scaled RTD gradient, matching its weight in the
    /// joint objective.
    pub norm_rtd: f64,
}

/// The two task gradients on the embedding table, as flat f64 vectors:
/// (d L_MLM / d e_g, raw d L_RTD / d table). Grad buffers are zeroed before
/// each pass and left zeroed afterwards.
pub fn shared_table_task_grads<F: Real>(
    bundle: &ModelBundle<F>,
    cfg: &TrainConfig,
    sb: &StepBatch,
    seeds: &StreamSeeds,
    step: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if bundle.mode == SharingMode::Nes {
        return Err(Error::Diagnostics(
            "nes keeps separate tables; the interference probe needs es or gdes".into(),
        ));
    }

    let tape = Tape::new();
    let (l_mlm, x_tilde) = build_gen_side(&tape, bundle, cfg, sb, seeds, step)?;
    bundle.zero_grads();
    tape.backward(&l_mlm)?;
    let g_mlm: Vec<f64> = bundle.e_g.grad_or_zeros().iter().map(|g| g.into_f64()).collect();
    drop(tape);

    let tape = Tape::new();
    let l_rtd = build_disc_side(&tape, bundle, cfg, sb, &x_tilde, seeds, step)?;
    bundle.zero_grads();
    tape.backward(&l_rtd)?;
    let rtd_carrier = match bundle.mode {
        SharingMode::Es => &bundle.e_g,
        SharingMode::Gdes => bundle.e_delta.as_ref().expect("gdes has e_delta"),
        SharingMode::Nes => unreachable!("rejected above"),
    };
    let g_rtd: Vec<f64> = rtd_carrier.grad_or_zeros().iter().map(|g| g.into_f64()).collect();
    bundle.zero_grads();
    Ok((g_mlm, g_rtd))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn interference_probe<F: Real>(
    bundle: &ModelBundle<F>,
    cfg: &TrainConfig,
    sb: &StepBatch,
    seeds: &StreamSeeds,
    step: u64,
    lambda: f64,
) -> Result<InterferenceProbe> {
    if lambda < 0.0 {
        return Err(Error::config("lambda", "must be nonnegative"));
    }
    let (g_mlm, g_rtd_raw) = shared_table_task_grads(bundle, cfg, sb, seeds, step)?;
    let g_rtd: Vec<f64> = g_rtd_raw.iter().map(|x| x * lambda).collect();
    let (n_mlm, n_rtd) = (norm(&g_mlm), norm(&g_rtd));
    let cos_angle = if n_mlm > 0.0 && n_rtd > 0.0 {
        let dot: f64 = g_mlm.iter().zip(&g_rtd).map(|(a, b)| a * b).sum();
        Some(dot / (n_mlm * n_rtd))
    } else {
        None
    };
    Ok(InterferenceProbe { step, cos_angle, norm_mlm: n_mlm, norm_rtd: n_rtd })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::Trainer;
    use crate::text::{build_vocab, encode_sequence};

    fn fixture(mode: SharingMode) -> (Trainer<f64>, StepBatch) {
        let mut cfg = TrainConfig::desk_defaults();
        cfg.mode = mode;
        cfg.gen.n_layers = 1;
        cfg.gen.hidden = 8;
        cfg.gen.n_heads = 2;
        cfg.gen.ffn_inner = 16;
        cfg.gen.max_rel_distance = 2;
        cfg.disc = cfg.gen.clone();
        cfg.max_seq_len = 12;
        cfg.batch_size = 3;
        cfg.seed = 21;
        let text = "a copper kettle sings while the gardener prunes early roses \n\
                    the comet returns and the band tunes quiet strings";
        let vocab = build_vocab(text, 40).unwrap();
        let docs: Vec<_> =
            text.lines().map(|l| encode_sequence(&vocab, l, cfg.max_seq_len)).collect();
        let trainer = Trainer::new(cfg, vocab, docs).unwrap();
        let sb = trainer.next_batch().unwrap();
        (trainer, sb)
    }

    #[test]
    fn lambda_scales_the_norm_but_not_the_angle() {
        let (t, sb) = fixture(SharingMode::Es);
        let p1 = interference_probe(&t.bundle, &t.cfg, &sb, &t.seeds, 0, 1.0).unwrap();
        let p50 = interference_probe(&t.bundle, &t.cfg, &sb, &t.seeds, 0, 50.0).unwrap();
        let (a, b) = (p1.cos_angle.unwrap(), p50.cos_angle.unwrap());
        assert!((a - b).abs() < 1e-12);
        assert!((p50.norm_rtd - 50.0 * p1.norm_rtd).abs() < 1e-9 * p50.norm_rtd.max(1.0));
        assert_eq!(p1.norm_mlm, p50.norm_mlm);
        assert!(a > -1.0 - 1e-12 && a < 1.0 + 1e-12);
    }

    #[test]
    fn identical_gradients_have_cosine_one() {
        let (t, sb) = fixture(SharingMode::Es);
        let (g_mlm, _) = shared_table_task_grads(&t.bundle, &t.cfg, &sb, &t.seeds, 0).unwrap();
        // A task compared against a copy of itself is the degenerate
        // "no conflict" case.
        let n = norm(&g_mlm);
        assert!(n > 0.0);
        let dot: f64 = g_mlm.iter().map(|x| x * x).sum();
        assert!((dot / (n * n) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nes_is_refused() {
        let (t, sb) = fixture(SharingMode::Nes);
        let err = interference_probe(&t.bundle, &t.cfg, &sb, &t.seeds, 0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Diagnostics(_)), "{err}");
    }

    #[test]
    fn gdes_probe_reads_the_delta_carrier() {
        let (t, sb) = fixture(SharingMode::Gdes);
        let probe = interference_probe(&t.bundle, &t.cfg, &sb, &t.seeds, 0, 50.0).unwrap();
        assert!(probe.norm_mlm > 0.0);
        assert!(probe.norm_rtd > 0.0, "rtd gradient reaches e_delta");
        assert!(probe.cos_angle.is_some());
        // Buffers are left clean for whoever trains next.
        assert!(t.bundle.e_g.grad().is_none());
    }

    #[test]
    fn task_gradients_recompose_the_es_joint_gradient() {
        let (t, sb) = fixture(SharingMode::Es);
        let lambda = 17.0;
        let (g_mlm, g_rtd) = shared_table_task_grads(&t.bundle, &t.cfg, &sb, &t.seeds, 0).unwrap();

        let tape = Tape::new();
        let (l_mlm, x_tilde) = build_gen_side(&tape, &t.bundle, &t.cfg, &sb, &t.seeds, 0).unwrap();
        let l_rtd = build_disc_side(&tape, &t.bundle, &t.cfg, &sb, &x_tilde, &t.seeds, 0).unwrap();
        let joint = tape.add(&l_mlm, &tape.scale(&l_rtd, lambda).unwrap()).unwrap();
        t.bundle.zero_grads();
        tape.backward(&joint).unwrap();
        let g_joint = t.bundle.e_g.grad_or_zeros();

        let mut worst = 0.0f64;
        for i in 0..g_joint.len() {
            let recomposed = g_mlm[i] + lambda * g_rtd[i];
            worst = worst.max((recomposed - g_joint[i]).abs());
        }
        assert!(worst < 1e-10, "max deviation {worst}");
    }
}
