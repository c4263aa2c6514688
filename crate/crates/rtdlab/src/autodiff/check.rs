//! Finite-difference oracle for the tape.
//!
//! `grad_check` differentiates the *declared* semantics of a graph: the
//! baseline pass records every `stop_gradient` output, and each perturbed
//! evaluation replays those recorded values, so a perturbation can never
//! travel through a stop-gradient branch. Without that, any graph mixing a
//! leaf's direct path with a cut path would produce spurious disagreement
//! even when both the tape and the check are correct.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;

use super::tape::{SgMode, Tape};
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LeafReport {
    pub leaf: usize,
    pub entries_checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_leaf: Vec<LeafReport>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Relative error with a unit floor, so near-zero gradient entries are held
/// to an absolute standard instead of an exploding ratio.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Check every entry of every leaf. `builder` must be deterministic: called
/// repeatedly with perturbed leaf values, it must rebuild the same graph.
pub fn grad_check<F, B>(builder: B, leaves: &[Tensor<F>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Real,
    B: Fn(&Tape<F>, &[Tensor<F>]) -> Result<Tensor<F>>,
{
    grad_check_sampled(builder, leaves, tolerance, None, 0)
}

/// Like [`grad_check`], but for large leaves only `max_entries` randomly
/// chosen entries (seeded) are finite-differenced. The analytic gradient is
/// still the full backward pass; sampling only bounds the oracle's cost.
pub fn grad_check_sampled<F, B>(
    builder: B,
    leaves: &[Tensor<F>],
    tolerance: f64,
    max_entries: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Real,
    B: Fn(&Tape<F>, &[Tensor<F>]) -> Result<Tensor<F>>,
{
    let _ = tolerance;
    for (i, leaf) in leaves.iter().enumerate() {
        if !leaf.requires_grad() {
            return Err(Error::Config {
                field: format!("leaf {i}"),
                message: "grad_check leaves must require gradients".into(),
            });
        }
    }

    // Baseline: analytic gradients and the stop-gradient log.
    let tape = Tape::new();
    tape.set_sg_mode(SgMode::Record(Vec::new()));
    let loss = builder(&tape, leaves)?;
    if loss.numel() != 1 {
        return Err(Error::LossNotScalar(loss.shape().to_vec()));
    }
    if !loss.item().into_f64().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    for leaf in leaves {
        leaf.zero_grad();
    }
    // A loss that never touched the tape (constant builders, pure
    // stop-gradient compositions) has zero gradient everywhere.
    if loss.binding().is_some() {
        tape.backward(&loss)?;
    }
    let analytic: Vec<Vec<F>> = leaves.iter().map(|l| l.grad_or_zeros()).collect();
    let sg_log = tape.take_sg_log();
    drop(tape);

    let eval = |leaves: &[Tensor<F>]| -> Result<f64> {
        let tape = Tape::new();
        tape.set_sg_mode(SgMode::Replay(sg_log.clone(), 0));
        let loss = builder(&tape, leaves)?;
        Ok(loss.item().into_f64())
    };

    let mut per_leaf = Vec::with_capacity(leaves.len());
    let mut overall: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let entries: Vec<usize> = match max_entries {
            Some(k) if n > k => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (li as u64).wrapping_mul(0x9e37_79b9));
                let mut chosen = std::collections::BTreeSet::new();
                while chosen.len() < k {
                    chosen.insert(rng.gen_range(0..n));
                }
                chosen.into_iter().collect()
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &entries {
            let x0 = leaf.values()[i];
            let h = F::from_f64(1e-4) * (F::one() + x0.abs());

            leaf.values_mut()[i] = x0 + h;
            let f_plus = eval(leaves)?;
            leaf.values_mut()[i] = x0 - h;
            let f_minus = eval(leaves)?;
            leaf.values_mut()[i] = x0;

            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            let fd = (f_plus - f_minus) / (2.0 * h.into_f64());
            let a = analytic[li][i].into_f64();
            worst = worst.max(rel_err(a, fd));
        }
        overall = overall.max(worst);
        per_leaf.push(LeafReport {
            leaf: li,
            entries_checked: entries.len(),
            max_rel_err: worst,
        });
    }

    Ok(GradCheckReport {
        per_leaf,
        max_rel_err: overall,
    })
}
