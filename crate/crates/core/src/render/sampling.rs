//! Sample placement along rays: stratified quadrature and inverse-CDF
//! resampling from a coarse weight histogram.

use rand::Rng;

use super::camera::Ray;

/// Floor added to every histogram bin before resampling, so no bin is
/// starved entirely.
pub const RESAMPLE_FLOOR: f64 = 1e-3;

/// `n + 1` evenly spaced edges over `[near, far]`.
pub fn uniform_edges(near: f64, far: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| near + (far - near) * i as f64 / n as f64).collect()
}

/// One position per equal sub-interval of `[ray.near, ray.far]`; midpoints
/// without jitter, uniform within the stratum with it.
pub fn stratified_samples<G: Rng + ?Sized>(ray: &Ray, n: usize, rng: &mut G, jitter: bool) -> Vec<f64> {
    let step = (ray.far - ray.near) / n as f64;
    (0..n)
        .map(|i| {
            let u = if jitter { rng.random::<f64>() } else { 0.5 };
            ray.near + step * (i as f64 + u)
        })
        .collect()
}

/// Inverse CDF of the piecewise-constant density given by `weights` over the
/// bins delimited by `edges`, evaluated at `u ∈ [0,1]` (ascending).
fn invert(weights: &[f64], edges: &[f64], us: impl Iterator<Item = f64>) -> Vec<f64> {
    let clean: Vec<f64> = weights
        .iter()
        .map(|&w| if w.is_finite() && w > 0.0 { w } else { 0.0 })
        .collect();
    let total: f64 = clean.iter().sum();
    let nb = clean.len();
    if total <= 0.0 {
        // all-zero histogram: fall back to the uniform density
        let (lo, hi) = (edges[0], edges[nb]);
        return us.map(|u| lo + (hi - lo) * u).collect();
    }
    let pdf: Vec<f64> = clean.iter().map(|&w| w + RESAMPLE_FLOOR).collect();
    let z: f64 = pdf.iter().sum();
    let mut cdf = Vec::with_capacity(nb + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &pdf {
        acc += p / z;
        cdf.push(acc);
    }
    cdf[nb] = 1.0;
    let mut out = Vec::new();
    let mut b = 0;
    for u in us {
        while b + 1 < nb && cdf[b + 1] <= u {
            b += 1;
        }
        let span = cdf[b + 1] - cdf[b];
        let f = if span > 0.0 { ((u - cdf[b]) / span).clamp(0.0, 1.0) } else { 0.0 };
        out.push(edges[b] + f * (edges[b + 1] - edges[b]));
    }
    out
}

/// `n` sorted positions drawn from the histogram, at quantiles
/// `(i + ½)/n` (or `(i + ξ_i)/n` with jitter).
pub fn proposal_resample<G: Rng + ?Sized>(weights: &[f64], edges: &[f64], n: usize, rng: Option<&mut G>) -> Vec<f64> {
    assert_eq!(edges.len(), weights.len() + 1, "edges must delimit the weight bins");
    let us: Vec<f64> = match rng {
        Some(r) => (0..n).map(|i| (i as f64 + r.random::<f64>()) / n as f64).collect(),
        None => (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect(),
    };
    invert(weights, edges, us.into_iter())
}

/// `n + 1` sorted interval edges drawn from the histogram, spanning the same
/// range; the outer edges are fixed and inner quantiles optionally jittered
/// within their strata.
pub fn resample_edges<G: Rng + ?Sized>(weights: &[f64], edges: &[f64], n: usize, rng: Option<&mut G>) -> Vec<f64> {
    assert_eq!(edges.len(), weights.len() + 1, "edges must delimit the weight bins");
    let us: Vec<f64> = match rng {
        Some(r) => (0..=n)
            .map(|i| {
                if i == 0 || i == n {
                    i as f64 / n as f64
                } else {
                    (i as f64 + r.random::<f64>() - 0.5) / n as f64
                }
            })
            .collect(),
        None => (0..=n).map(|i| i as f64 / n as f64).collect(),
    };
    invert(weights, edges, us.into_iter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::ThreadRng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ray(near: f64, far: f64) -> Ray {
        Ray {
            origin: [0.0; 3],
            direction: [0.0, 0.0, 1.0],
            near,
            far,
        }
    }

    #[test]
    fn stratified_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(stratified_samples(&ray(1.0, 3.0), 1, &mut rng, false), vec![2.0]);
        assert_eq!(
            stratified_samples(&ray(0.0, 1.0), 4, &mut rng, false),
            vec![0.125, 0.375, 0.625, 0.875]
        );
        for _ in 0..100 {
            let s = stratified_samples(&ray(0.5, 2.5), 8, &mut rng, true);
            for (i, v) in s.iter().enumerate() {
                let lo = 0.5 + 0.25 * i as f64;
                assert!(*v >= lo && *v <= lo + 0.25);
            }
        }
    }

    #[test]
    fn uniform_weights_reproduce_midpoints() {
        let edges = uniform_edges(0.0, 1.0, 8);
        let s = proposal_resample::<ThreadRng>(&[1.0; 8], &edges, 4, None);
        for (a, b) in s.iter().zip([0.125, 0.375, 0.625, 0.875]) {
            assert!((a - b).abs() < 1e-12);
        }
        let e = resample_edges::<ThreadRng>(&[0.3; 8], &edges, 5, None);
        for (i, v) in e.iter().enumerate() {
            assert!((v - i as f64 / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_bin_captures_almost_everything() {
        let edges = uniform_edges(0.0, 1.0, 10);
        let mut w = [0.0; 10];
        w[6] = 1.0;
        let s = proposal_resample::<ThreadRng>(&w, &edges, 64, None);
        let inside = s.iter().filter(|&&v| (0.6..=0.7).contains(&v)).count();
        // floor mass outside the bin is 9e-3/(1+1e-2)
        assert!(inside >= 63, "{inside}");
    }

    #[test]
    fn two_bin_fraction_matches_inverse_cdf() {
        let edges = uniform_edges(0.0, 1.0, 2);
        let n = 100_000;
        let s = proposal_resample::<ThreadRng>(&[1.0, 3.0], &edges, n, None);
        let frac = s.iter().filter(|&&v| v > 0.5).count() as f64 / n as f64;
        let want = (3.0 + RESAMPLE_FLOOR) / (4.0 + 2.0 * RESAMPLE_FLOOR);
        assert!((frac - want).abs() < 1e-4, "{frac} vs {want}");
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let edges = uniform_edges(2.0, 4.0, 4);
        let s = proposal_resample::<ThreadRng>(&[0.0; 4], &edges, 2, None);
        assert_eq!(s, vec![2.5, 3.5]);
    }

    #[test]
    fn jittered_edges_are_sorted_and_span_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let edges = uniform_edges(1.0, 5.0, 16);
        let w: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64).collect();
        for _ in 0..50 {
            let e = resample_edges(&w, &edges, 32, Some(&mut rng));
            assert_eq!(e.len(), 33);
            assert_eq!(e[0], 1.0);
            assert_eq!(e[32], 5.0);
            assert!(e.windows(2).all(|p| p[1] >= p[0]));
        }
    }
}
