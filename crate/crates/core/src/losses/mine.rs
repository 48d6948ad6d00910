//! Neural mutual-information estimator (Donsker–Varadhan bound).
//!
//! `I = mean(T(joint)) − log(mean(exp(T(marginal))))` where marginal pairs are
//! built by permuting `u` within the batch. The critic `T` sees `2m − 1` and
//! a per-batch standardized `u`. `m` keeps a fixed scale so the gradient can
//! spread mask values apart; standardizing it would project that direction
//! out.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::{Container, Record};
use crate::error::{Error, Result};
use crate::nn::mlp::{backward_into, forward_into};
use crate::nn::{adam_step, AdamParams, Mlp, MlpCache, MlpSpec, ParamBuffer};
use crate::real::Real;

/// Added to the batch variance before standardizing.
pub const MINE_STD_EPS: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct MineEstimator<R> {
    pub critic: Mlp<R>,
    /// Running mean of `mean(exp(T(marginal)))`; zero before the first update.
    pub ema_denominator: R,
    pub ema_rate: R,
    /// Batches skipped because they held fewer than two pairs.
    pub skipped: u64,
    cache: MlpCache<R>,
    rows: Vec<R>,
    d_in: Vec<R>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MineOutput<R> {
    /// The bound value for this batch.
    pub value: R,
    /// `coef · ∂I/∂m_i`.
    pub d_m: Vec<R>,
    /// `coef · ∂I/∂u_i`.
    pub d_u: Vec<R>,
}

struct Standardized<R> {
    z: Vec<R>,
    inv_std: R,
}

fn affine_m<R: Real>(m: &[R]) -> Vec<R> {
    m.iter().map(|&v| R::c(2.0) * v - R::one()).collect()
}

fn standardize<R: Real>(x: &[R]) -> Standardized<R> {
    let n = R::c(x.len() as f64);
    let mean = x.iter().copied().sum::<R>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
    let inv_std = R::one() / (var + R::c(MINE_STD_EPS)).sqrt();
    Standardized {
        z: x.iter().map(|&v| (v - mean) * inv_std).collect(),
        inv_std,
    }
}

/// Reverse of [`standardize`]: maps `∂/∂z` to `∂/∂x`.
fn standardize_backward<R: Real>(s: &Standardized<R>, dz: &[R]) -> Vec<R> {
    let n = R::c(dz.len() as f64);
    let mean_g = dz.iter().copied().sum::<R>() / n;
    let mean_gz = dz.iter().zip(&s.z).map(|(&g, &z)| g * z).sum::<R>() / n;
    dz.iter()
        .zip(&s.z)
        .map(|(&g, &z)| s.inv_std * (g - mean_g - z * mean_gz))
        .collect()
}

impl<R: Real> MineEstimator<R> {
    pub fn critic_spec(hidden: usize) -> MlpSpec {
        MlpSpec::new(2, hidden, 2, 1)
    }

    pub fn new<G: Rng + ?Sized>(hidden: usize, ema_rate: f64, rng: &mut G) -> Result<Self> {
        if !(0.0..1.0).contains(&ema_rate) {
            return Err(Error::Config(format!("MINE ema_rate must be in [0,1), got {ema_rate}")));
        }
        Ok(MineEstimator {
            critic: Mlp::new(Self::critic_spec(hidden), rng)?,
            ema_denominator: R::zero(),
            ema_rate: R::c(ema_rate),
            skipped: 0,
            cache: MlpCache::default(),
            rows: Vec::new(),
            d_in: Vec::new(),
        })
    }

    fn build_rows(&mut self, zm: &[R], zu: &[R], perm: &[usize]) {
        self.rows.clear();
        for i in 0..zm.len() {
            self.rows.push(zm[i]);
            self.rows.push(zu[i]);
        }
        for i in 0..zm.len() {
            self.rows.push(zm[i]);
            self.rows.push(zu[perm[i]]);
        }
    }

    /// Bound value for a fixed permutation, without touching any state.
    pub fn value_with_perm(&self, m: &[R], u: &[R], perm: &[usize]) -> Result<R> {
        let n = m.len();
        crate::error::check_dim("mine batch", n, u.len())?;
        crate::error::check_dim("mine permutation", n, perm.len())?;
        let (zm, su) = (affine_m(m), standardize(u));
        let mut rows = Vec::with_capacity(4 * n);
        for i in 0..n {
            rows.extend([zm[i], su.z[i]]);
        }
        for i in 0..n {
            rows.extend([zm[i], su.z[perm[i]]]);
        }
        let mut cache = MlpCache::default();
        forward_into(&self.critic.spec, &self.critic.params.values, &rows, 2 * n, &mut cache)?;
        let t = cache.raw_output();
        Ok(dv_bound(&t[..n], &t[n..]).0)
    }

    /// Bound value averaged over `reps` random permutations.
    pub fn value<G: Rng + ?Sized>(&self, m: &[R], u: &[R], reps: usize, rng: &mut G) -> Result<R> {
        let mut acc = R::zero();
        let mut perm: Vec<usize> = (0..m.len()).collect();
        for _ in 0..reps.max(1) {
            perm.shuffle(rng);
            acc += self.value_with_perm(m, u, &perm)?;
        }
        Ok(acc / R::c(reps.max(1) as f64))
    }

    /// Evaluates the bound on one batch and accumulates `coef · ∂I/∂θ` into
    /// the critic gradients. The denominator's gradient uses the running
    /// average (`ema_rate = 0` gives the exact gradient). Returns `None` for
    /// batches smaller than two.
    pub fn estimate<G: Rng + ?Sized>(&mut self, m: &[R], u: &[R], coef: R, rng: &mut G) -> Result<Option<MineOutput<R>>> {
        let n = m.len();
        crate::error::check_dim("mine batch", n, u.len())?;
        if n < 2 {
            self.skipped += 1;
            return Ok(None);
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        self.estimate_with_perm(m, u, &perm, coef).map(Some)
    }

    pub fn estimate_with_perm(&mut self, m: &[R], u: &[R], perm: &[usize], coef: R) -> Result<MineOutput<R>> {
        let n = m.len();
        crate::error::check_dim("mine permutation", n, perm.len())?;
        let (zm, su) = (affine_m(m), standardize(u));
        self.build_rows(&zm, &su.z, perm);
        forward_into(&self.critic.spec, &self.critic.params.values, &self.rows, 2 * n, &mut self.cache)?;
        let t = self.cache.raw_output().to_vec();
        let (value, mean_exp, shift) = dv_bound(&t[..n], &t[n..]);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                component: "mutual information".into(),
                detail: format!("critic produced a non-finite bound over {n} pairs"),
            });
        }

        // mean_exp is stored shifted by exp(shift); keep the running average unshifted.
        let current = mean_exp * shift.exp();
        self.ema_denominator = if self.ema_denominator > R::zero() {
            self.ema_rate * self.ema_denominator + (R::one() - self.ema_rate) * current
        } else {
            current
        };
        let nr = R::c(n as f64);
        let mut d_t = vec![coef / nr; 2 * n];
        for i in 0..n {
            d_t[n + i] = -coef * t[n + i].exp() / (nr * self.ema_denominator);
        }
        backward_into(
            &self.critic.spec,
            &self.critic.params.values,
            &mut self.cache,
            &d_t,
            &mut self.critic.params.grads,
            &mut self.d_in,
        )?;
        let mut dzm = vec![R::zero(); n];
        let mut dzu = vec![R::zero(); n];
        for i in 0..n {
            dzm[i] += self.d_in[2 * i] + self.d_in[2 * (n + i)];
            dzu[i] += self.d_in[2 * i + 1];
            dzu[perm[i]] += self.d_in[2 * (n + i) + 1];
        }
        Ok(MineOutput {
            value,
            d_m: dzm.into_iter().map(|g| R::c(2.0) * g).collect(),
            d_u: standardize_backward(&su, &dzu),
        })
    }

    pub fn cast<S: Real>(&self) -> MineEstimator<S> {
        MineEstimator {
            critic: self.critic.cast(),
            ema_denominator: S::c(self.ema_denominator.f64()),
            ema_rate: S::c(self.ema_rate.f64()),
            skipped: self.skipped,
            cache: MlpCache::default(),
            rows: Vec::new(),
            d_in: Vec::new(),
        }
    }

    pub fn save_into(&self, c: &mut Container, prefix: &str) {
        self.critic.params.save_into(c, &format!("{prefix}.critic"));
        c.insert(
            format!("{prefix}.state"),
            Record::from_reals(&[self.ema_denominator, self.ema_rate, R::c(self.critic.spec.hidden_dim as f64)]),
        );
        c.insert(format!("{prefix}.skipped"), Record::from_u64s(&[self.skipped]));
    }

    pub fn load_from(c: &Container, prefix: &str) -> Result<Self> {
        let state: Vec<R> = c.reals(&format!("{prefix}.state"))?;
        if state.len() != 3 {
            return Err(Error::Format(format!("`{prefix}.state` must hold 3 values")));
        }
        let spec = Self::critic_spec(state[2].f64() as usize);
        let params = ParamBuffer::load_from(c, &format!("{prefix}.critic"), false)?;
        if params.len() != spec.param_count() {
            return Err(Error::Format(format!("`{prefix}.critic` size does not match its spec")));
        }
        let skipped = c.get(&format!("{prefix}.skipped"))?.to_u64s()?;
        Ok(MineEstimator {
            critic: Mlp { spec, params },
            ema_denominator: state[0],
            ema_rate: state[1],
            skipped: skipped.first().copied().unwrap_or(0),
            cache: MlpCache::default(),
            rows: Vec::new(),
            d_in: Vec::new(),
        })
    }
}

/// Returns `(bound, mean(exp(T_m − shift)), shift)` with `shift = max T_m`.
fn dv_bound<R: Real>(joint: &[R], marginal: &[R]) -> (R, R, R) {
    let n = R::c(joint.len() as f64);
    let mean_joint = joint.iter().copied().sum::<R>() / n;
    let shift = marginal.iter().copied().fold(R::neg_infinity(), R::max);
    let mean_exp = marginal.iter().map(|&t| (t - shift).exp()).sum::<R>() / n;
    (mean_joint - (shift + mean_exp.ln()), mean_exp, shift)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MineSanityConfig {
    pub rho: f64,
    pub samples: usize,
    pub steps: usize,
    pub batch: usize,
    pub hidden: usize,
    pub lr: f64,
    pub ema_rate: f64,
    pub seed: u64,
}

impl Default for MineSanityConfig {
    fn default() -> Self {
        MineSanityConfig {
            rho: 0.9,
            samples: 100_000,
            steps: 3000,
            batch: 1024,
            hidden: 32,
            lr: 2e-3,
            ema_rate: 0.99,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MineSanityReport {
    pub rho: f64,
    pub estimate: f64,
    pub analytic: f64,
    pub abs_error: f64,
}

/// Mutual information of a standard bivariate Gaussian with correlation `ρ`.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

fn correlated_pairs<G: Rng + ?Sized>(rho: f64, n: usize, rng: &mut G) -> (Vec<f64>, Vec<f64>) {
    let c = (1.0 - rho * rho).sqrt();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = StandardNormal.sample(rng);
        let y: f64 = StandardNormal.sample(rng);
        a.push(x);
        b.push(rho * x + c * y);
    }
    (a, b)
}

/// Trains a critic alone on correlated Gaussian pairs, then evaluates the
/// bound on a fresh sample of the same size.
pub fn mine_sanity(cfg: &MineSanityConfig) -> Result<MineSanityReport> {
    use rand::SeedableRng;
    if !(cfg.rho > -1.0 && cfg.rho < 1.0) {
        return Err(Error::Config(format!("rho must be in (-1, 1), got {}", cfg.rho)));
    }
    if cfg.samples < 2 || cfg.batch < 2 {
        return Err(Error::Config("mine-sanity needs at least two samples per batch".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let (a, b) = correlated_pairs(cfg.rho, cfg.samples, &mut rng);
    let (ta, tb) = correlated_pairs(cfg.rho, cfg.samples, &mut rng);
    let mut est = MineEstimator::<f64>::new(cfg.hidden, cfg.ema_rate, &mut rng)?;
    let batch = cfg.batch.min(cfg.samples);
    let mut bm = vec![0.0; batch];
    let mut bu = vec![0.0; batch];
    for step in 0..cfg.steps {
        for k in 0..batch {
            let i = rng.random_range(0..cfg.samples);
            bm[k] = a[i];
            bu[k] = b[i];
        }
        est.critic.params.zero_grads();
        est.estimate(&bm, &bu, -1.0, &mut rng)?;
        let progress = step as f64 / cfg.steps.max(1) as f64;
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        adam_step(&mut est.critic.params, AdamParams::default().with_lr(lr.max(cfg.lr * 0.05)));
    }
    let estimate = est.value(&ta, &tb, 4, &mut rng)?;
    let analytic = gaussian_mi(cfg.rho);
    Ok(MineSanityReport {
        rho: cfg.rho,
        estimate,
        analytic,
        abs_error: (estimate - analytic).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn est(seed: u64) -> MineEstimator<f64> {
        MineEstimator::new(8, 0.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn constant_critic_gives_zero() {
        let mut e = est(0);
        e.critic.params.values.iter_mut().for_each(|v| *v = 0.0);
        let last = e.critic.params.values.len() - 1;
        e.critic.params.values[last] = 1.7;
        let m = [0.1, 0.5, 0.9, 0.2];
        let u = [0.3, 0.1, 0.4, 0.8];
        let v = e.value_with_perm(&m, &u, &[2, 0, 3, 1]).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn tiny_batch_is_skipped() {
        let mut e = est(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(e.estimate(&[0.5], &[0.5], 1.0, &mut rng).unwrap().is_none());
        assert_eq!(e.skipped, 1);
    }

    #[test]
    fn zero_coefficient_leaves_critic_grads_zero() {
        let mut e = est(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = e
            .estimate(&[0.1, 0.4, 0.8], &[0.9, 0.3, 0.2], 0.0, &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(e.critic.params.grads.max_abs(), 0.0);
        assert!(out.d_m.iter().chain(&out.d_u).all(|&g| g == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut e = est(2);
        let m = [0.1, 0.45, 0.8, 0.3, 0.62];
        let u = [0.9, 0.35, 0.2, 0.7, 0.05];
        let perm = [3, 0, 4, 1, 2];
        e.critic.params.zero_grads();
        let out = e.estimate_with_perm(&m, &u, &perm, 1.0).unwrap();
        let h = 1e-6;
        for i in 0..m.len() {
            let mut p = m;
            p[i] += h;
            let mut q = m;
            q[i] -= h;
            let fd = (e.value_with_perm(&p, &u, &perm).unwrap() - e.value_with_perm(&q, &u, &perm).unwrap()) / (2.0 * h);
            assert!((fd - out.d_m[i]).abs() < 1e-6, "m[{i}]: {fd} vs {}", out.d_m[i]);
            let mut p = u;
            p[i] += h;
            let mut q = u;
            q[i] -= h;
            let fd = (e.value_with_perm(&m, &p, &perm).unwrap() - e.value_with_perm(&m, &q, &perm).unwrap()) / (2.0 * h);
            assert!((fd - out.d_u[i]).abs() < 1e-6, "u[{i}]: {fd} vs {}", out.d_u[i]);
        }
        let grads = e.critic.params.grads.data.clone();
        for j in 0..grads.len() {
            let mut p = e.clone();
            p.critic.params.values[j] += h;
            let mut q = e.clone();
            q.critic.params.values[j] -= h;
            let fd = (p.value_with_perm(&m, &u, &perm).unwrap() - q.value_with_perm(&m, &u, &perm).unwrap()) / (2.0 * h);
            assert!((fd - grads[j]).abs() < 1e-6, "θ[{j}]: {fd} vs {}", grads[j]);
        }
    }

    #[test]
    fn gaussian_mi_value() {
        assert!((gaussian_mi(0.9) - 0.830_365_603_410_825_5).abs() < 1e-12);
        assert_eq!(gaussian_mi(0.0), 0.0);
    }

    #[test]
    fn short_sanity_run_moves_toward_truth() {
        let cfg = MineSanityConfig {
            samples: 20_000,
            steps: 400,
            batch: 256,
            ..Default::default()
        };
        let r = mine_sanity(&cfg).unwrap();
        assert!(r.estimate > 0.4, "{r:?}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut e = est(3);
        e.ema_denominator = 1.25;
        e.skipped = 4;
        let mut c = Container::new();
        e.save_into(&mut c, "mine");
        let back = MineEstimator::<f64>::load_from(&c, "mine").unwrap();
        assert_eq!(back.critic.params.values, e.critic.params.values);
        assert_eq!(back.ema_denominator, 1.25);
        assert_eq!(back.skipped, 4);
    }
}
