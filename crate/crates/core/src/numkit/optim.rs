//! SGD with a cosine-annealed learning rate.

use super::{NumError, Result};
use std::collections::BTreeMap;
use std::f64::consts::PI;

/// Optimizer configuration. `total_steps` is the annealing horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr0: f64,
    pub total_steps: usize,
    pub momentum: f64,
}

impl SgdConfig {
    pub fn new(lr0: f64, total_steps: usize, momentum: f64) -> Result<Self> {
        if lr0 <= 0.0 {
            return Err(NumError::InvalidArgument("lr0 must be positive".into()));
        }
        if total_steps == 0 {
            return Err(NumError::InvalidArgument("total_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(NumError::InvalidArgument(
                "momentum must lie in [0, 1)".into(),
            ));
        }
        Ok(SgdConfig {
            lr0,
            total_steps,
            momentum,
        })
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr0: 0.01,
            total_steps: 1,
            momentum: 0.0,
        }
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * step / total_steps))`, clamped to 0 past the
/// horizon.
pub fn cosine_annealed_lr(step: usize, cfg: &SgdConfig) -> f64 {
    if step >= cfg.total_steps {
        return 0.0;
    }
    cfg.lr0 * 0.5 * (1.0 + (PI * step as f64 / cfg.total_steps as f64).cos())
}

/// Momentum buffers keyed by parameter name. Empty until the first step with
/// `momentum > 0`.
#[derive(Debug, Default)]
pub struct SgdState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        SgdState::default()
    }
}

/// One SGD update: `p <- p - lr(step) * g`, with a classical momentum buffer
/// per parameter tensor when `momentum > 0`. `params` and `grads` must pair
/// up by name and length.
pub fn sgd_step(
    params: &mut [(String, &mut [f64])],
    grads: &[(String, &[f64])],
    step: usize,
    cfg: &SgdConfig,
    state: &mut SgdState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(NumError::StructureMismatch(format!(
            "{} params vs {} grads",
            params.len(),
            grads.len()
        )));
    }
    let lr = cosine_annealed_lr(step, cfg);
    for ((pname, p), (gname, g)) in params.iter_mut().zip(grads) {
        if pname != gname || p.len() != g.len() {
            return Err(NumError::StructureMismatch(format!(
                "param {pname} ({}) vs grad {gname} ({})",
                p.len(),
                g.len()
            )));
        }
        if cfg.momentum > 0.0 {
            let vel = state
                .velocity
                .entry(pname.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            if vel.len() != p.len() {
                return Err(NumError::StructureMismatch(format!(
                    "momentum buffer for {pname}"
                )));
            }
            for ((pv, gv), v) in p.iter_mut().zip(g.iter()).zip(vel.iter_mut()) {
                *v = cfg.momentum * *v + gv;
                *pv -= lr * *v;
            }
        } else {
            for (pv, gv) in p.iter_mut().zip(g.iter()) {
                *pv -= lr * gv;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr0: f64, total: usize) -> SgdConfig {
        SgdConfig::new(lr0, total, 0.0).unwrap()
    }

    #[test]
    fn lr_starts_at_lr0_and_ends_at_zero() {
        let c = cfg(0.01, 100);
        assert!((cosine_annealed_lr(0, &c) - 0.01).abs() < 1e-15);
        assert_eq!(cosine_annealed_lr(100, &c), 0.0);
        assert_eq!(cosine_annealed_lr(500, &c), 0.0);
    }

    #[test]
    fn lr_at_halfway_is_half() {
        let c = cfg(0.02, 100);
        assert!((cosine_annealed_lr(50, &c) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let c = cfg(1.0, 10);
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut state = SgdState::new();
        sgd_step(
            &mut [("p".into(), p.as_mut_slice())],
            &[("p".into(), g.as_slice())],
            0,
            &c,
            &mut state,
        )
        .unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn hand_case_single_step() {
        let c = cfg(1.0, 1_000_000_000);
        let mut p = vec![1.0];
        let g = vec![0.5];
        let mut state = SgdState::new();
        sgd_step(
            &mut [("p".into(), p.as_mut_slice())],
            &[("p".into(), g.as_slice())],
            0,
            &c,
            &mut state,
        )
        .unwrap();
        // lr(0) = lr0 = 1, so p = 1 - 0.5.
        assert!((p[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(p) = p^2, grad = 2p, from p = 3.
        let c = cfg(0.1, 100);
        let mut p = vec![3.0];
        let mut state = SgdState::new();
        for step in 0..100 {
            let g = vec![2.0 * p[0]];
            sgd_step(
                &mut [("p".into(), p.as_mut_slice())],
                &[("p".into(), g.as_slice())],
                step,
                &c,
                &mut state,
            )
            .unwrap();
        }
        assert!(p[0].abs() < 0.1, "p = {}", p[0]);
    }

    #[test]
    fn structure_mismatch_is_rejected() {
        let c = cfg(1.0, 10);
        let mut p = vec![0.0; 2];
        let g = vec![0.0; 3];
        let mut state = SgdState::new();
        let r = sgd_step(
            &mut [("p".into(), p.as_mut_slice())],
            &[("p".into(), g.as_slice())],
            0,
            &c,
            &mut state,
        );
        assert!(matches!(r, Err(NumError::StructureMismatch(_))));
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let c = SgdConfig::new(0.1, 1_000_000_000, 0.9).unwrap();
        let mut p = vec![0.0];
        let mut state = SgdState::new();
        for step in 0..2 {
            let g = vec![1.0];
            sgd_step(
                &mut [("p".into(), p.as_mut_slice())],
                &[("p".into(), g.as_slice())],
                step,
                &c,
                &mut state,
            )
            .unwrap();
        }
        // v1 = 1, p -= 0.1; v2 = 1.9, p -= 0.19 (lr is ~lr0 early on).
        assert!((p[0] + 0.29).abs() < 1e-6, "p = {}", p[0]);
    }
}
