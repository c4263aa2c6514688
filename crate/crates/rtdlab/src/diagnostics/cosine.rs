//! Average pairwise cosine similarity of embedding rows.
//!
//! Convention notes that shape the numbers: rows are used raw (no mean
//! centering), zero-norm rows are dropped because cosine is undefined at
//! zero, and special tokens never enter a report because they are not word
//! pieces. A statistic whose usable sample shrinks below two rows is
//! reported as absent rather than faked.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::pretrain::{ModelBundle, SharingMode};
use crate::real::Real;
use crate::text::N_SPECIALS;

/// Mean cosine similarity over all unordered pairs of a row sample.
///
/// Samples `round(fraction * rows)` distinct rows (deterministically from
/// `seed`), drops zero-norm rows, and errors if fewer than two usable rows
/// remain. All rows of `table` are candidates; callers that want to exclude
/// special tokens pass a table view without them.
pub fn avg_cosine_similarity<F: Real>(
    table: &Tensor<F>,
    sample_fraction: f64,
    seed: u64,
) -> Result<f64> {
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(Error::config("sample_fraction", "must lie in (0, 1]"));
    }
    let shape = table.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "avg_cosine_similarity",
            detail: format!("table must be 2-D, got {shape:?}"),
        });
    }
    let (n, h) = (shape[0], shape[1]);
    let k = ((sample_fraction * n as f64).round() as usize).min(n);
    if k < 2 {
        return Err(Error::Diagnostics(format!(
            "sample of {k} rows cannot form a pair (fraction {sample_fraction} of {n} rows)"
        )));
    }

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..k {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices[..k].to_vec();
    chosen.sort_unstable();

    let values = table.values();
    let mut rows: Vec<(usize, f64)> = Vec::new();
    for &r in &chosen {
        let norm_sq: f64 = values[r * h..(r + 1) * h]
            .iter()
            .map(|v| {
                let x = v.into_f64();
                x * x
            })
            .sum();
        if norm_sq > 0.0 {
            rows.push((r, norm_sq.sqrt()));
        }
    }
    if rows.len() < 2 {
        return Err(Error::Diagnostics(format!(
            "only {} usable rows after dropping zero-norm rows",
            rows.len()
        )));
    }

    let mut total = 0.0;
    let mut pairs = 0u64;
    for a in 0..rows.len() {
        let (ra, na) = rows[a];
        let va = &values[ra * h..(ra + 1) * h];
        for &(rb, nb) in rows.iter().skip(a + 1) {
            let vb = &values[rb * h..(rb + 1) * h];
            let dot: f64 = va.iter().zip(vb).map(|(x, y)| x.into_f64() * y.into_f64()).sum();
            total += dot / (na * nb);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// The per-mode similarity summary. Absent fields mean the mode has no such
/// table, or the statistic had fewer than two usable rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineReport {
    pub mode: SharingMode,
    pub sim_e_g: Option<f64>,
    pub sim_e_d: Option<f64>,
    pub sim_e_delta: Option<f64>,
    pub sample_fraction: f64,
    pub seed: u64,
}

impl CosineReport {
    /// Flat key=value rendering; absent statistics print as "absent".
    pub fn to_kv_text(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map_or_else(|| "absent".to_string(), |x| format!("{x:?}"))
        }
        format!(
            "mode={}\nsim_e_g={}\nsim_e_d={}\nsim_e_delta={}\nsample_fraction={:?}\nseed={}\n",
            self.mode.name(),
            cell(self.sim_e_g),
            cell(self.sim_e_d),
            cell(self.sim_e_delta),
            self.sample_fraction,
            self.seed,
        )
    }
}

/// Copies the non-special rows of a vocab-aligned table.
fn word_piece_rows<F: Real>(table: &Tensor<F>) -> Tensor<F> {
    let (n, h) = (table.shape()[0], table.shape()[1]);
    let keep = n.saturating_sub(N_SPECIALS);
    let values = table.values();
    Tensor::from_vec(values[N_SPECIALS * h..n * h].to_vec(), &[keep, h]).expect("contiguous rows")
}

fn stat_or_absent<F: Real>(table: &Tensor<F>, fraction: f64, seed: u64) -> Result<Option<f64>> {
    match avg_cosine_similarity(&word_piece_rows(table), fraction, seed) {
        Ok(v) => Ok(Some(v)),
        Err(Error::Diagnostics(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Similarity statistics for whichever tables the bundle's mode keeps.
///
/// es reports the shared table under both the generator and discriminator
/// columns. gdes reports the generator table, the materialized
/// `e_g + e_delta` view, and `e_delta` itself.
pub fn cosine_report<F: Real>(
    bundle: &ModelBundle<F>,
    sample_fraction: f64,
    seed: u64,
) -> Result<CosineReport> {
    let (sim_e_g, sim_e_d, sim_e_delta) = match bundle.mode {
        SharingMode::Es => {
            let shared = stat_or_absent(&bundle.e_g, sample_fraction, seed)?;
            (shared, shared, None)
        }
        SharingMode::Nes => (
            stat_or_absent(&bundle.e_g, sample_fraction, seed)?,
            stat_or_absent(bundle.e_d.as_ref().expect("nes has e_d"), sample_fraction, seed)?,
            None,
        ),
        SharingMode::Gdes => {
            let delta = bundle.e_delta.as_ref().expect("gdes has e_delta");
            let folded: Vec<F> = bundle
                .e_g
                .values()
                .iter()
                .zip(delta.values().iter())
                .map(|(&a, &b)| a + b)
                .collect();
            let folded = Tensor::from_vec(folded, bundle.e_g.shape())?;
            (
                stat_or_absent(&bundle.e_g, sample_fraction, seed)?,
                stat_or_absent(&folded, sample_fraction, seed)?,
                stat_or_absent(delta, sample_fraction, seed)?,
            )
        }
    };
    Ok(CosineReport { mode: bundle.mode, sim_e_g, sim_e_d, sim_e_delta, sample_fraction, seed })
}
