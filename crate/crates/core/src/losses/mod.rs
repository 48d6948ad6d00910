//! Training objectives and their derivatives.
//!
//! Every loss here is a plain function of rendered quantities; the matching
//! `*_grad` helpers return derivatives that the per-ray pipeline feeds back
//! through compositing and the field.

mod mine;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub use mine::{gaussian_mi, mine_sanity, MineEstimator, MineOutput, MineSanityConfig, MineSanityReport};

/// Lower bound on the ray-level uncertainty before it enters the loss.
pub const U_MIN: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Uncertainty loss weight λ.
    pub lambda_u: f64,
    /// Mutual-information weight γ.
    pub gamma: f64,
    pub lambda_mask: f64,
    pub lambda_dist: f64,
    pub lambda_prop: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_u: 3e-5,
            gamma: 3e-4,
            lambda_mask: 1e-2,
            lambda_dist: 2e-2,
            lambda_prop: 1.0,
        }
    }
}

impl LossWeights {
    pub fn none() -> Self {
        LossWeights {
            lambda_u: 0.0,
            gamma: 0.0,
            lambda_mask: 0.0,
            lambda_dist: 0.0,
            lambda_prop: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_u, self.gamma, self.lambda_mask, self.lambda_dist, self.lambda_prop];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Loss components of one step, as written to the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    #[serde(rename = "L_r")]
    pub recon: f64,
    #[serde(rename = "L_u")]
    pub uncertainty: f64,
    #[serde(rename = "I")]
    pub mutual_info: f64,
    #[serde(rename = "L_mask")]
    pub mask: f64,
    #[serde(rename = "L_dist")]
    pub distortion: f64,
    #[serde(rename = "L_prop")]
    pub proposal: f64,
}

impl LossParts {
    /// `L_r + λ·L_u − γ·I + λ_mask·L_mask + λ_dist·L_dist + λ_prop·L_prop`.
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.recon + w.lambda_u * self.uncertainty - w.gamma * self.mutual_info
            + w.lambda_mask * self.mask
            + w.lambda_dist * self.distortion
            + w.lambda_prop * self.proposal
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("L_r", self.recon),
            ("L_u", self.uncertainty),
            ("I", self.mutual_info),
            ("L_mask", self.mask),
            ("L_dist", self.distortion),
            ("L_prop", self.proposal),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    #[serde(flatten)]
    pub parts: LossParts,
    pub total: f64,
}

impl LossRecord {
    pub fn new(step: u64, parts: LossParts, w: &LossWeights) -> Self {
        LossRecord {
            step,
            parts,
            total: parts.total(w),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("loss record serializes")
    }
}

/// Squared error of one ray summed over channels, with its gradient.
pub fn recon_ray<R: Real>(pred: [R; 3], target: [R; 3]) -> (R, [R; 3]) {
    let d = [pred[0] - target[0], pred[1] - target[1], pred[2] - target[2]];
    let two = R::c(2.0);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2], [two * d[0], two * d[1], two * d[2]])
}

/// Mean over rays of the channel-summed squared error.
pub fn recon_loss<R: Real>(pred: &[[R; 3]], target: &[[R; 3]]) -> Result<R> {
    crate::error::check_dim("recon batch", pred.len(), target.len())?;
    if pred.is_empty() {
        return Ok(R::zero());
    }
    let sum: R = pred.iter().zip(target).map(|(&p, &t)| recon_ray(p, t).0).sum();
    Ok(sum / R::c(pred.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyTerm<R> {
    pub loss: R,
    /// `∂/∂Ĉ_s`.
    pub d_static_color: [R; 3],
    /// `∂/∂U` (zero when the floor is active).
    pub d_u: R,
}

/// `‖C − Ĉ_s‖² / (2U²) + log U` for one ray with `U` floored at [`U_MIN`].
pub fn uncertainty_ray<R: Real>(target: [R; 3], static_color: [R; 3], u: R) -> UncertaintyTerm<R> {
    let floor = R::c(U_MIN);
    let (uf, active) = if u > floor { (u, true) } else { (floor, false) };
    let (err, d_err) = recon_ray(static_color, target);
    let inv2 = R::one() / (uf * uf);
    let half = R::c(0.5);
    UncertaintyTerm {
        loss: half * err * inv2 + uf.ln(),
        d_static_color: [half * d_err[0] * inv2, half * d_err[1] * inv2, half * d_err[2] * inv2],
        d_u: if active {
            -err * inv2 / uf + R::one() / uf
        } else {
            R::zero()
        },
    }
}

pub fn uncertainty_loss<R: Real>(target: &[[R; 3]], static_color: &[[R; 3]], u: &[R]) -> Result<R> {
    crate::error::check_dim("uncertainty batch", target.len(), static_color.len())?;
    crate::error::check_dim("uncertainty batch", target.len(), u.len())?;
    if target.is_empty() {
        return Ok(R::zero());
    }
    let sum: R = (0..target.len())
        .map(|i| uncertainty_ray(target[i], static_color[i], u[i]).loss)
        .sum();
    Ok(sum / R::c(target.len() as f64))
}

/// `mean(1 − m)`; the derivative w.r.t. each `m` is `−1/n`.
pub fn mask_sparsity_loss<R: Real>(m: &[R]) -> R {
    if m.is_empty() {
        return R::zero();
    }
    let sum: R = m.iter().map(|&v| R::one() - v).sum();
    sum / R::c(m.len() as f64)
}

/// `Σ_{i,j} w_i w_j |s_i − s_j| + ⅓ Σ_i w_i² δ_i` with midpoints `s` sorted
/// ascending. Linear time through prefix sums.
pub fn distortion_loss<R: Real>(w: &[R], s: &[R], delta: &[R]) -> R {
    let mut cross = R::zero();
    let mut wsum = R::zero();
    let mut wssum = R::zero();
    let mut own = R::zero();
    for i in 0..w.len() {
        cross += w[i] * (s[i] * wsum - wssum);
        wsum += w[i];
        wssum += w[i] * s[i];
        own += w[i] * w[i] * delta[i];
    }
    R::c(2.0) * cross + own / R::c(3.0)
}

/// Adds `scale · ∂L_dist/∂w` into `d_w`.
pub fn distortion_grad<R: Real>(w: &[R], s: &[R], delta: &[R], scale: R, d_w: &mut [R]) {
    let n = w.len();
    let total_w: R = w.iter().copied().sum();
    let total_ws: R = w.iter().zip(s).map(|(&a, &b)| a * b).sum();
    let mut wb = R::zero();
    let mut wsb = R::zero();
    let two = R::c(2.0);
    for k in 0..n {
        let wa = total_w - wb - w[k];
        let wsa = total_ws - wsb - w[k] * s[k];
        let pair = (s[k] * wb - wsb) + (wsa - s[k] * wa);
        d_w[k] += scale * (two * pair + two * w[k] * delta[k] / R::c(3.0));
        wb += w[k];
        wsb += w[k] * s[k];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn distortion_naive(w: &[f64], s: &[f64], d: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..w.len() {
            for j in 0..w.len() {
                acc += w[i] * w[j] * (s[i] - s[j]).abs();
            }
            acc += w[i] * w[i] * d[i] / 3.0;
        }
        acc
    }

    #[test]
    fn recon_cases() {
        let c = [[0.2, 0.5, 0.9]];
        assert_eq!(recon_loss(&c, &c).unwrap(), 0.0);
        assert_eq!(recon_loss(&[[0.0; 3]], &[[1.0; 3]]).unwrap(), 3.0);
        let a: f64 = recon_loss(&[[0.1, 0.0, 0.0]], &[[0.0; 3]]).unwrap();
        let b = recon_loss(&[[0.2, 0.0, 0.0]], &[[0.0; 3]]).unwrap();
        assert!((b / a - 4.0).abs() < 1e-12);
        assert!(recon_loss(&c, &[]).is_err());
    }

    #[test]
    fn uncertainty_cases() {
        // U = 1: 0.5·err + 0
        let t = uncertainty_ray([1.0, 0.0, 0.0], [0.0; 3], 1.0f64);
        assert!((t.loss - 0.5).abs() < 1e-15);
        // err = 1 gives a stationary point at U = 1
        assert!(t.d_u.abs() < 1e-15);
        let t = uncertainty_ray([0.3; 3], [0.3; 3], 0.5f64);
        assert!((t.loss - 0.5f64.ln()).abs() < 1e-15);
        // U below the floor is clamped and passes no gradient
        let t = uncertainty_ray([0.3; 3], [0.3; 3], 0.0f64);
        assert!((t.loss - U_MIN.ln()).abs() < 1e-15);
        assert_eq!(t.d_u, 0.0);
    }

    #[test]
    fn uncertainty_grad_matches_fd() {
        let c = [0.9, 0.1, 0.4];
        let cs = [0.3, 0.2, 0.6];
        let u: f64 = 0.37;
        let g = uncertainty_ray(c, cs, u);
        let h = 1e-7;
        let fd = (uncertainty_ray(c, cs, u + h).loss - uncertainty_ray(c, cs, u - h).loss) / (2.0 * h);
        assert!((fd - g.d_u).abs() < 1e-6);
        for k in 0..3 {
            let mut p = cs;
            p[k] += h;
            let mut m = cs;
            m[k] -= h;
            let fd = (uncertainty_ray(c, p, u).loss - uncertainty_ray(c, m, u).loss) / (2.0 * h);
            assert!((fd - g.d_static_color[k]).abs() < 1e-5);
        }
    }

    #[test]
    fn sparsity_cases() {
        assert_eq!(mask_sparsity_loss(&[1.0f64; 4]), 0.0);
        assert_eq!(mask_sparsity_loss(&[0.0f64; 4]), 1.0);
        assert_eq!(mask_sparsity_loss(&[0.0f64, 1.0, 0.0, 1.0]), 0.5);
    }

    #[test]
    fn distortion_cases() {
        assert_eq!(distortion_loss(&[0.0f64; 3], &[0.1, 0.5, 0.9], &[0.2; 3]), 0.0);
        let v = distortion_loss(&[0.7f64], &[0.5], &[0.2]);
        assert!((v - 0.49 * 0.2 / 3.0).abs() < 1e-15);
        let d = 0.6;
        let v = distortion_loss(&[0.5f64, 0.5], &[0.2, 0.2 + d], &[0.0, 0.0]);
        assert!((v - 2.0 * 0.25 * d).abs() < 1e-15);
    }

    #[test]
    fn parts_total_and_record_keys() {
        let p = LossParts {
            recon: 1.0,
            uncertainty: 2.0,
            mutual_info: 3.0,
            mask: 4.0,
            distortion: 5.0,
            proposal: 6.0,
        };
        assert_eq!(p.total(&LossWeights::none()), 1.0);
        let w = LossWeights::default();
        let want = 1.0 + 3e-5 * 2.0 - 3e-4 * 3.0 + 1e-2 * 4.0 + 2e-2 * 5.0 + 6.0;
        assert!((p.total(&w) - want).abs() < 1e-12);
        let line = LossRecord::new(7, p, &w).to_json_line();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        for k in ["step", "L_r", "L_u", "I", "L_mask", "L_dist", "L_prop", "total"] {
            assert!(v.get(k).is_some(), "missing {k} in {line}");
        }
        assert!(LossWeights { gamma: -1.0, ..w }.validate().is_err());
    }

    proptest! {
        #[test]
        fn distortion_matches_quadratic_form(
            raw in proptest::collection::vec((0.0f64..1.0, 0.0f64..0.2), 1..12)
        ) {
            let w: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let d: Vec<f64> = raw.iter().map(|r| r.1).collect();
            let s: Vec<f64> = (0..w.len()).map(|i| (i as f64 + 0.5) / w.len() as f64).collect();
            let fast = distortion_loss(&w, &s, &d);
            prop_assert!((fast - distortion_naive(&w, &s, &d)).abs() < 1e-10);
            let mut g = vec![0.0; w.len()];
            distortion_grad(&w, &s, &d, 1.0, &mut g);
            let h = 1e-6;
            for k in 0..w.len() {
                let mut p = w.clone();
                p[k] += h;
                let mut m = w.clone();
                m[k] -= h;
                let fd = (distortion_naive(&p, &s, &d) - distortion_naive(&m, &s, &d)) / (2.0 * h);
                prop_assert!((fd - g[k]).abs() < 1e-6);
            }
        }
    }
}
