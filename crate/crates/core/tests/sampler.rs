use std::collections::HashMap;
use std::path::Path;

use msth::sampler::{fingerprint, RayImportanceTable, RaySample, SamplerConfig, IMPORTANCE_CACHE_NAME};
use msth::scene::{generate_synthetic, load_dataset, Preset, SceneDataset, SynthSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small(dir: &Path, preset: Preset, frames: usize) -> SceneDataset {
    let spec = SynthSpec {
        preset,
        width: 10,
        height: 8,
        frames,
        train_cameras: 2,
        test_cameras: 1,
        oracle_samples: 128,
        seed: 3,
    };
    generate_synthetic(&spec, dir).unwrap();
    load_dataset(dir).unwrap()
}

/// Pearson statistic against `expected` (already scaled to counts), pooling
/// cells whose expectation is below 5. Returns `(statistic, dof)`.
fn chi_square(observed: &HashMap<(u32, u32), u64>, expected: &[((u32, u32), f64)]) -> (f64, usize) {
    let mut stat = 0.0;
    let mut cells = 0usize;
    let (mut pool_o, mut pool_e) = (0.0, 0.0);
    for &(k, e) in expected {
        let o = *observed.get(&k).unwrap_or(&0) as f64;
        if e < 5.0 {
            pool_o += o;
            pool_e += e;
            continue;
        }
        stat += (o - e).powi(2) / e;
        cells += 1;
    }
    if pool_e > 0.0 {
        stat += (pool_o - pool_e).powi(2) / pool_e;
        cells += 1;
    }
    (stat, cells - 1)
}

#[test]
fn importance_draws_fit_the_joint_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(dir.path(), Preset::Orbit, 6);
    let table = RayImportanceTable::build(&ds, SamplerConfig::default()).unwrap();
    let n = 1_000_000u64;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = HashMap::new();
    for _ in 0..n {
        let s = table.sample_importance(&mut rng);
        *counts.entry((s.ray, s.frame)).or_insert(0u64) += 1;
    }
    let mut expected = Vec::new();
    for r in 0..table.n_rays() {
        let pt = table.p_time(r);
        for (f, p) in pt.iter().enumerate() {
            expected.push(((r as u32, f as u32), table.p_ray[r] * p * n as f64));
        }
    }
    let total: f64 = expected.iter().map(|e| e.1).sum();
    assert!((total - n as f64).abs() < 1e-3 * n as f64);
    let (stat, dof) = chi_square(&counts, &expected);
    let crit = ChiSquared::new(dof as f64).unwrap().inverse_cdf(0.99);
    assert!(stat < crit, "chi2 {stat} >= {crit} (dof {dof})");
}

#[test]
fn mixture_matches_uniform_share() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(dir.path(), Preset::Orbit, 4);
    let table = RayImportanceTable::build(&ds, SamplerConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 200_000;
    let batch = table.sample_batch(n, 1.0, &mut rng);
    // p_uniform = 1: every frame equally likely
    let mut per_frame = [0usize; 4];
    for s in &batch {
        per_frame[s.frame as usize] += 1;
    }
    for c in per_frame {
        assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
    }
    let batch = table.sample_batch(n, 0.0, &mut rng);
    let mass: f64 = batch.iter().map(|&s| table.p_joint(s)).sum::<f64>() / n as f64;
    let uniform_mass = 1.0 / (table.n_rays() * table.frames) as f64;
    assert!(mass > uniform_mass, "importance draws should favour likely cells");
}

#[test]
fn static_video_gives_uniform_rays() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(dir.path(), Preset::Static, 5);
    let table = RayImportanceTable::build(&ds, SamplerConfig::default()).unwrap();
    let p0 = 1.0 / table.n_rays() as f64;
    let spread = table.p_ray.iter().fold(0.0f64, |m, &p| m.max((p - p0).abs()));
    assert!(spread < 1e-9, "spread {spread}");
    for r in 0..table.n_rays() {
        let pt = table.p_time(r);
        assert!(pt.iter().all(|&p| (p - 0.2).abs() < 1e-4));
    }
}

#[test]
fn single_frame_dataset_warns_and_is_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(dir.path(), Preset::Orbit, 1);
    let table = RayImportanceTable::build(&ds, SamplerConfig::default()).unwrap();
    assert_eq!(table.warnings.len(), 1);
    assert!(table.p_time(0) == vec![1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(table.sample_batch(100, 0.0, &mut rng).iter().all(|s| s.frame == 0));
}

#[test]
fn draws_are_reproducible_and_pixels_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(dir.path(), Preset::Orbit, 3);
    let table = RayImportanceTable::build(&ds, SamplerConfig::default()).unwrap();
    let a = table.sample_batch(500, 0.2, &mut ChaCha8Rng::seed_from_u64(9));
    let b = table.sample_batch(500, 0.2, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
    let w = 10u32;
    for s in a {
        let px = table.pixel(s.ray);
        assert!(ds.train.contains(&px.camera));
        let k = ds.train.iter().position(|&c| c == px.camera).unwrap();
        assert_eq!(s.ray, k as u32 * 80 + px.y * w + px.x);
    }
    let last = table.pixel(table.n_rays() as u32 - 1);
    assert_eq!((last.x, last.y), (9, 7));
}

#[test]
fn cache_round_trips_and_invalidates() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small(dir.path(), Preset::Orbit, 3);
    let cfg = SamplerConfig::default();
    let built = RayImportanceTable::build(&ds, cfg).unwrap();
    let cached = RayImportanceTable::cached(&ds, cfg).unwrap();
    let cache = dir.path().join(IMPORTANCE_CACHE_NAME);
    assert!(cache.exists());
    let loaded = RayImportanceTable::load(&cache, fingerprint(&ds, &cfg)).unwrap();
    for t in [&cached, &loaded] {
        assert_eq!(t.p_ray, built.p_ray);
        assert_eq!(t.cond, built.cond);
        assert_eq!(t.layout, built.layout);
    }
    let s = RaySample { ray: 7, frame: 2 };
    assert_eq!(loaded.p_joint(s), built.p_joint(s));
    let other = SamplerConfig { tau1: 0.3, ..cfg };
    assert!(RayImportanceTable::load(&cache, fingerprint(&ds, &other)).is_err());
    let rebuilt = RayImportanceTable::cached(&ds, other).unwrap();
    assert_eq!(rebuilt.config.tau1, 0.3);
}
