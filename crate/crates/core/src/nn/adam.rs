use serde::{Deserialize, Serialize};

use super::param::ParamBuffer;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

impl AdamParams {
    pub fn with_lr(self, lr: f64) -> Self {
        AdamParams { lr, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdamOutcome {
    Applied,
    /// A gradient was NaN/inf; values and moments were left untouched.
    SkippedNonFinite,
}

/// Bias-corrected Adam. Sparse gradient buffers get the lazy variant: only
/// entries written this step have their moments and values updated.
/// Gradients are left in place; the caller zeroes them.
pub fn adam_step<R: Real>(p: &mut ParamBuffer<R>, hp: AdamParams) -> AdamOutcome {
    let ParamBuffer {
        values,
        grads,
        adam_m,
        adam_v,
        step_count,
    } = p;

    let finite = match grads.touched() {
        Some(list) => list.iter().all(|&i| grads.data[i as usize].is_finite()),
        None => grads.data.iter().all(|g| g.is_finite()),
    };
    if !finite {
        return AdamOutcome::SkippedNonFinite;
    }

    *step_count += 1;
    let t = *step_count as i32;
    let b1 = R::c(hp.beta1);
    let b2 = R::c(hp.beta2);
    let c1 = R::c(1.0 - hp.beta1.powi(t));
    let c2 = R::c(1.0 - hp.beta2.powi(t));
    let lr = R::c(hp.lr);
    let eps = R::c(hp.eps);
    let one = R::one();
    let n = values.len();

    let mut update = |i: usize| {
        let g = grads.data[i];
        let m = b1 * adam_m[i] + (one - b1) * g;
        let v = b2 * adam_v[i] + (one - b2) * g * g;
        adam_m[i] = m;
        adam_v[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    match grads.touched() {
        Some(list) => {
            for &i in list {
                update(i as usize);
            }
        }
        None => {
            for i in 0..n {
                update(i);
            }
        }
    }
    AdamOutcome::Applied
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_values() {
        let mut p = ParamBuffer::from_values(vec![0.5f32, -1.0, 2.0], false);
        for _ in 0..3 {
            assert_eq!(adam_step(&mut p, AdamParams::default()), AdamOutcome::Applied);
        }
        assert_eq!(p.values, vec![0.5, -1.0, 2.0]);
        assert_eq!(p.step_count, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr * sign(g).
        let mut p = ParamBuffer::from_values(vec![0.0f64], false);
        p.grads.add(0, 1.0);
        adam_step(&mut p, AdamParams::default().with_lr(0.01));
        assert!((p.values[0] + 0.01).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = ParamBuffer::from_values(vec![0.3f32, 0.7], false);
        p.grads.add(0, 5.0);
        p.grads.add(1, -2.0);
        adam_step(&mut p, AdamParams::default().with_lr(0.0));
        assert_eq!(p.values, vec![0.3, 0.7]);
    }

    #[test]
    fn non_finite_gradient_skips_update() {
        let mut p = ParamBuffer::from_values(vec![1.0f32, 1.0], false);
        p.grads.add(1, f32::NAN);
        assert_eq!(adam_step(&mut p, AdamParams::default()), AdamOutcome::SkippedNonFinite);
        assert_eq!(p.values, vec![1.0, 1.0]);
        assert_eq!(p.step_count, 0);
    }

    #[test]
    fn sparse_update_only_touches_written_entries() {
        let mut p = ParamBuffer::from_values(vec![0.0f32; 8], true);
        p.grads.add(2, 1.0);
        adam_step(&mut p, AdamParams::default());
        assert!(p.values[2] < 0.0);
        assert!(p.values.iter().enumerate().all(|(i, &v)| i == 2 || v == 0.0));
    }

    #[test]
    fn trajectories_are_reproducible() {
        let run = || {
            let mut p = ParamBuffer::from_values(vec![1.0f32, -2.0], false);
            for k in 0..10 {
                p.zero_grads();
                p.grads.add(0, 0.1 * k as f32);
                p.grads.add(1, p.values[1]);
                adam_step(&mut p, AdamParams::default());
            }
            p.values
        };
        assert_eq!(run(), run());
    }
}
