//! AdamW with decoupled weight decay, global-norm clipping folded into the
//! moment update, and a linear warmup/decay schedule.
//!
//! Moments are kept in f64 regardless of the parameter precision so that f32
//! runs do not lose accumulator bits; the final write-back converts once.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

use super::TrainConfig;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling. Gradients are never mutated; the clip
    /// scale is applied while forming the moments.
    pub clip: f64,
}

impl AdamHyper {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamHyper {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            clip: cfg.grad_clip_norm,
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.98, eps: 1e-6, weight_decay: 0.01, clip: 1.0 }
    }
}

/// First and second moments for one parameter list, in list order.
pub struct OptimizerState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn for_params<F: Real>(params: &[Tensor<F>]) -> Self {
        OptimizerState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One AdamW step over `params`, reading each leaf's accumulated gradient.
///
/// `decay[i]` gates decoupled weight decay for `params[i]`; lengths must
/// match. Returns the pre-clip global gradient norm. Gradient buffers are
/// left untouched; the caller decides when to zero them.
pub fn adamw_update<F: Real>(
    params: &[Tensor<F>],
    decay: &[bool],
    state: &mut OptimizerState,
    hyper: &AdamHyper,
    lr_t: f64,
) -> Result<f64> {
    assert_eq!(params.len(), decay.len(), "decay mask length mismatch");
    assert_eq!(params.len(), state.m.len(), "optimizer state size mismatch");

    let grads: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad_or_zeros().iter().map(|g| g.into_f64()).collect())
        .collect();
    let mut sq_sum = 0.0;
    for g in &grads {
        for &gi in g {
            if !gi.is_finite() {
                return Err(Error::NonFinite { op: "adamw_update" });
            }
            sq_sum += gi * gi;
        }
    }
    let norm = sq_sum.sqrt();
    let clip_scale = if norm > hyper.clip { hyper.clip / norm } else { 1.0 };

    state.step += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.step as i32);

    for (i, param) in params.iter().enumerate() {
        let g = &grads[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let mut theta: Vec<f64> = param.values().iter().map(|t| t.into_f64()).collect();
        for j in 0..g.len() {
            let gj = g[j] * clip_scale;
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let mut t = theta[j];
            if decay[i] {
                t -= lr_t * hyper.weight_decay * t;
            }
            t -= lr_t * m_hat / (v_hat.sqrt() + hyper.eps);
            theta[j] = t;
        }
        let back: Vec<F> = theta.iter().map(|&t| F::from_f64(t)).collect();
        param.set_values(&back);
    }
    Ok(norm)
}

/// Linear ramp 0 -> `peak` over `warmup` steps, then linear decay to 0 at
/// `max`. Steps past `max` stay at 0.
pub fn lr_schedule(step: u64, warmup: u64, max: u64, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if max <= warmup {
        return peak;
    }
    peak * max.saturating_sub(step) as f64 / (max - warmup) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::param(vec![v], &[1]).unwrap()
    }

    #[test]
    fn zero_grad_zero_decay_is_a_no_op() {
        let p = one(1.5);
        let mut st = OptimizerState::for_params(&[p.clone()]);
        let hy = AdamHyper { weight_decay: 0.0, ..AdamHyper::default() };
        let norm = adamw_update(&[p.clone()], &[true], &mut st, &hy, 0.1).unwrap();
        assert_eq!(norm, 0.0);
        assert_eq!(p.to_vec(), vec![1.5]);
    }

    #[test]
    fn decay_alone_multiplies_by_one_minus_lr_wd() {
        let p = one(1.0);
        let mut st = OptimizerState::for_params(&[p.clone()]);
        let hy = AdamHyper { weight_decay: 0.01, ..AdamHyper::default() };
        adamw_update(&[p.clone()], &[true], &mut st, &hy, 0.1).unwrap();
        assert!((p.to_vec()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_is_bias_corrected_unit_direction() {
        let p = one(0.0);
        p.accumulate_grad(&[1.0]);
        let mut st = OptimizerState::for_params(&[p.clone()]);
        let hy = AdamHyper { weight_decay: 0.0, ..AdamHyper::default() };
        let norm = adamw_update(&[p.clone()], &[false], &mut st, &hy, 1e-3).unwrap();
        assert!((norm - 1.0).abs() < 1e-15);
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let expect = -1e-3 / (1.0 + 1e-6);
        assert!((p.to_vec()[0] - expect).abs() < 1e-12);
        assert!((p.to_vec()[0] + 9.99999e-4).abs() < 1e-9);
    }

    #[test]
    fn clip_rescales_the_step_but_reports_the_raw_norm() {
        let a = one(0.0);
        let b = one(0.0);
        a.accumulate_grad(&[3.0]);
        b.accumulate_grad(&[4.0]);
        let params = [a.clone(), b.clone()];
        let mut st = OptimizerState::for_params(&params);
        let hy = AdamHyper { weight_decay: 0.0, clip: 1.0, eps: 1e-12, ..AdamHyper::default() };
        let norm = adamw_update(&params, &[false, false], &mut st, &hy, 1e-3).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        // Post-clip grads are (0.6, 0.8); the Adam direction is sign-only at
        // the first step, so both coordinates still move by ~lr.
        let ratio = a.to_vec()[0] / b.to_vec()[0];
        assert!((ratio - 1.0).abs() < 1e-9);
        // Gradient buffers themselves are untouched.
        assert_eq!(a.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn grad_scale_leaves_direction_unchanged_at_tiny_eps() {
        let g = [0.3, -1.2, 0.07, 4.0];
        let run = |c: f64| {
            let p = Tensor::param(vec![1.0, -2.0, 0.5, 3.0], &[4]).unwrap();
            let scaled: Vec<f64> = g.iter().map(|x| x * c).collect();
            p.accumulate_grad(&scaled);
            let mut st = OptimizerState::for_params(&[p.clone()]);
            let hy = AdamHyper {
                weight_decay: 0.0,
                eps: 1e-12,
                clip: 1e18,
                ..AdamHyper::default()
            };
            adamw_update(&[p.clone()], &[false], &mut st, &hy, 1e-3).unwrap();
            p.to_vec()
        };
        let base = run(1.0);
        let scaled = run(7.3);
        for (x, y) in base.iter().zip(&scaled) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn non_finite_grad_is_rejected() {
        let p = one(0.0);
        p.accumulate_grad(&[f64::NAN]);
        let mut st = OptimizerState::for_params(&[p.clone()]);
        let err = adamw_update(&[p], &[false], &mut st, &AdamHyper::default(), 1e-3);
        assert!(matches!(err, Err(Error::NonFinite { op: "adamw_update" })));
    }

    #[test]
    fn moments_persist_across_steps() {
        let p = one(0.0);
        let mut st = OptimizerState::for_params(&[p.clone()]);
        let hy = AdamHyper { weight_decay: 0.0, ..AdamHyper::default() };
        p.accumulate_grad(&[1.0]);
        adamw_update(&[p.clone()], &[false], &mut st, &hy, 1e-3).unwrap();
        let after_one = p.to_vec()[0];
        p.zero_grad();
        p.accumulate_grad(&[1.0]);
        adamw_update(&[p.clone()], &[false], &mut st, &hy, 1e-3).unwrap();
        assert_eq!(st.step, 2);
        // Constant gradient keeps m_hat = 1, v_hat = 1: the second step has
        // the same size as the first.
        let delta2 = p.to_vec()[0] - after_one;
        assert!((delta2 - after_one).abs() < 1e-12);
    }

    #[test]
    fn schedule_matches_the_piecewise_line() {
        let peak = 3e-4;
        assert_eq!(lr_schedule(0, 10, 110, peak), 0.0);
        assert_eq!(lr_schedule(10, 10, 110, peak), peak);
        assert!((lr_schedule(60, 10, 110, peak) - peak / 2.0).abs() < 1e-18);
        assert_eq!(lr_schedule(110, 10, 110, peak), 0.0);
        assert_eq!(lr_schedule(200, 10, 110, peak), 0.0);
        // Degenerate all-warmup config holds the peak.
        assert_eq!(lr_schedule(5, 5, 5, peak), peak);
    }

    #[test]
    fn f32_params_update_through_f64_moments() {
        let p = Tensor::<f32>::param(vec![0.0], &[1]).unwrap();
        p.accumulate_grad(&[1.0f32]);
        let mut st = OptimizerState::for_params(&[p.clone()]);
        let hy = AdamHyper { weight_decay: 0.0, ..AdamHyper::default() };
        adamw_update(&[p.clone()], &[false], &mut st, &hy, 1e-3).unwrap();
        assert!((p.to_vec()[0] as f64 + 9.99999e-4).abs() < 1e-7);
    }
}
