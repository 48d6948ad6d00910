//! Quadrature volume rendering over piecewise-constant samples.

use crate::real::Real;

/// Compositing weights and transmittance of one ray.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Weights<R> {
    /// `w_i = T_i α_i`.
    pub w: Vec<R>,
    /// `T_0..T_n`; the last entry is the residual transmittance.
    pub trans: Vec<R>,
}

impl<R: Real> Weights<R> {
    pub fn t_final(&self) -> R {
        self.trans.last().copied().unwrap_or(R::one())
    }

    pub fn sum(&self) -> R {
        self.w.iter().copied().sum()
    }
}

/// `α_i = 1 − exp(−σ_i δ_i)`, `T_i = Π_{j<i} (1 − α_j)`, `w_i = T_i α_i`.
pub fn composite_weights<R: Real>(sigma: &[R], delta: &[R], out: &mut Weights<R>) {
    out.w.clear();
    out.trans.clear();
    let mut t = R::one();
    out.trans.push(t);
    for (&s, &d) in sigma.iter().zip(delta) {
        let x = -(s * d);
        let alpha = -x.exp_m1();
        out.w.push(t * alpha);
        t = t * x.exp();
        out.trans.push(t);
    }
}

/// `Σ w_i c_i` for row-major `rgb`.
pub fn weighted_color<R: Real>(w: &[R], rgb: &[R]) -> [R; 3] {
    let mut c = [R::zero(); 3];
    for (i, &wi) in w.iter().enumerate() {
        for k in 0..3 {
            c[k] += wi * rgb[i * 3 + k];
        }
    }
    c
}

pub fn weighted_sum<R: Real>(w: &[R], v: &[R]) -> R {
    w.iter().zip(v).map(|(&a, &b)| a * b).sum()
}

/// Composites over a black background: `(Ĉ, w, T_final)`.
pub fn composite<R: Real>(sigma: &[R], rgb: &[R], delta: &[R]) -> ([R; 3], Vec<R>, R) {
    let mut w = Weights::default();
    composite_weights(sigma, delta, &mut w);
    let c = weighted_color(&w.w, rgb);
    let tf = w.t_final();
    (c, w.w, tf)
}

/// Maps `∂L/∂w_i` to `∂L/∂σ_i`, overwriting `d_sigma`.
///
/// `∂w_i/∂σ_k = −δ_k w_i` for `k < i` and `δ_k T_{k+1}` for `k = i`.
pub fn weights_backward<R: Real>(wts: &Weights<R>, delta: &[R], d_w: &[R], d_sigma: &mut Vec<R>) {
    let n = wts.w.len();
    d_sigma.clear();
    d_sigma.resize(n, R::zero());
    let mut suffix = R::zero();
    for k in (0..n).rev() {
        d_sigma[k] = delta[k] * (d_w[k] * wts.trans[k + 1] - suffix);
        suffix += d_w[k] * wts.w[k];
    }
}

/// `U(r) = Σ w_i u_i` with weights from the static-branch densities.
pub fn render_uncertainty<R: Real>(sigma_static: &[R], u: &[R], delta: &[R]) -> R {
    let mut w = Weights::default();
    composite_weights(sigma_static, delta, &mut w);
    weighted_sum(&w.w, u)
}

/// `M(r) = Σ w_i (1 − m_i)`.
pub fn render_dynamic_weight<R: Real>(sigma: &[R], m: &[R], delta: &[R]) -> R {
    let mut w = Weights::default();
    composite_weights(sigma, delta, &mut w);
    dynamic_weight(&w.w, m)
}

pub fn dynamic_weight<R: Real>(w: &[R], m: &[R]) -> R {
    w.iter().zip(m).map(|(&a, &b)| a * (R::one() - b)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn slab(n: usize) -> f64 {
        let d = vec![1.0 / n as f64; n];
        let (c, _, _) = composite(&vec![2.0; n], &vec![1.0; 3 * n], &d);
        c[0]
    }

    #[test]
    fn empty_medium_is_black() {
        let (c, w, tf) = composite(&[0.0f64; 5], &[1.0; 15], &[0.2; 5]);
        assert_eq!(c, [0.0; 3]);
        assert!(w.iter().all(|&v| v == 0.0));
        assert_eq!(tf, 1.0);
    }

    #[test]
    fn homogeneous_slab_converges_to_beer_lambert() {
        let exact = 1.0 - (-2.0f64).exp();
        // constant σ makes the quadrature exact for every n
        let mut prev = f64::INFINITY;
        for n in [1, 4, 16, 64, 512] {
            let err = (slab(n) - exact).abs();
            assert!(err <= prev + 1e-6);
            prev = err;
        }
        assert!((slab(512) - 0.864_664_716_763_387_3).abs() < 1e-3);
    }

    #[test]
    fn opaque_first_sample_takes_everything() {
        let (_, w, tf) = composite(&[40.0f64, 3.0, 3.0], &[1.0; 9], &[1.0; 3]);
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!(w[1] < 1e-12 && w[2] < 1e-12 && tf < 1e-12);
    }

    #[test]
    fn uncertainty_and_dynamic_weight_cases() {
        // fully opaque at the first sample: U equals that sample's u
        assert!((render_uncertainty(&[1e3f64, 0.0], &[0.4, 0.4], &[1.0, 1.0]) - 0.4).abs() < 1e-12);
        assert_eq!(render_uncertainty(&[0.0f64; 3], &[1.0; 3], &[1.0; 3]), 0.0);
        assert!((weighted_sum(&[0.5f64, 0.25], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(render_dynamic_weight(&[5.0f64; 4], &[1.0; 4], &[1.0; 4]), 0.0);
        assert!((render_dynamic_weight(&[1e3f64, 0.0], &[0.0; 2], &[1.0; 2]) - 1.0).abs() < 1e-12);
        assert_eq!(dynamic_weight(&[0.5f64, 0.5], &[1.0, 0.0]), 0.5);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let sigma = [0.7f64, 2.3, 0.1, 4.0];
        let delta = [0.3, 0.2, 0.5, 0.25];
        let rgb = [0.1, 0.9, 0.3, 0.5, 0.5, 0.2, 0.8, 0.1, 0.7, 0.4, 0.6, 0.9];
        let gc = [0.3, -1.2, 0.7];
        let f = |s: &[f64], c: &[f64]| {
            let (col, _, _) = composite(s, c, &delta);
            col[0] * gc[0] + col[1] * gc[1] + col[2] * gc[2]
        };
        let mut w = Weights::default();
        composite_weights(&sigma, &delta, &mut w);
        let d_w: Vec<f64> = (0..4).map(|i| (0..3).map(|k| gc[k] * rgb[i * 3 + k]).sum()).collect();
        let mut ds = Vec::new();
        weights_backward(&w, &delta, &d_w, &mut ds);
        let h = 1e-6;
        for k in 0..4 {
            let mut p = sigma;
            p[k] += h;
            let mut m = sigma;
            m[k] -= h;
            let fd = (f(&p, &rgb) - f(&m, &rgb)) / (2.0 * h);
            assert!((fd - ds[k]).abs() < 1e-8, "σ[{k}]: {fd} vs {}", ds[k]);
        }
        for j in 0..12 {
            let mut p = rgb;
            p[j] += h;
            let mut m = rgb;
            m[j] -= h;
            let fd = (f(&sigma, &p) - f(&sigma, &m)) / (2.0 * h);
            let an = w.w[j / 3] * gc[j % 3];
            assert!((fd - an).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity(raw in proptest::collection::vec((0.0f64..50.0, 1e-4f64..0.5), 1..64)) {
            let s: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let d: Vec<f64> = raw.iter().map(|r| r.1).collect();
            let mut w = Weights::default();
            composite_weights(&s, &d, &mut w);
            prop_assert!(w.w.iter().all(|&v| v >= 0.0));
            prop_assert!((w.sum() + w.t_final() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn splitting_a_sample_changes_nothing(
            raw in proptest::collection::vec((0.0f64..10.0, 1e-3f64..0.5, 0.0f64..1.0), 1..16),
            at in 0usize..16,
        ) {
            let at = at % raw.len();
            let mut s = Vec::new();
            let mut d = Vec::new();
            let mut c = Vec::new();
            let mut s2 = Vec::new();
            let mut d2 = Vec::new();
            let mut c2 = Vec::new();
            for (i, r) in raw.iter().enumerate() {
                s.push(r.0);
                d.push(r.1);
                c.extend([r.2; 3]);
                let copies = if i == at { 2 } else { 1 };
                for _ in 0..copies {
                    s2.push(r.0);
                    d2.push(r.1 / copies as f64);
                    c2.extend([r.2; 3]);
                }
            }
            let (a, _, ta) = composite(&s, &c, &d);
            let (b, _, tb) = composite(&s2, &c2, &d2);
            prop_assert!((a[0] - b[0]).abs() < 1e-6);
            prop_assert!((ta - tb).abs() < 1e-6);
        }
    }
}
