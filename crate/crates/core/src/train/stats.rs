//! 4D-table write and collision statistics along sampled training rays.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hashgrid::CollisionStats;
use crate::model::{Model, RayTape};
use crate::scene::SceneDataset;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub res: [u32; 4],
    pub dense: bool,
    pub slot_count: usize,
    pub ungated: CollisionStatsRow,
    pub gated: CollisionStatsRow,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CollisionStatsRow {
    pub distinct_keys: usize,
    pub distinct_slots: usize,
    pub collision_rate: f64,
    pub occupied_fraction: f64,
}

impl From<CollisionStats> for CollisionStatsRow {
    fn from(s: CollisionStats) -> Self {
        CollisionStatsRow {
            distinct_keys: s.distinct_keys,
            distinct_slots: s.distinct_slots,
            collision_rate: s.collision_rate,
            occupied_fraction: s.occupied_fraction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WriteStats {
    pub mode: crate::field::EncodingMode,
    pub rays: usize,
    pub points: usize,
    pub gate_epsilon: f64,
    /// Points whose 4D branch weight `1 − m` exceeds `gate_epsilon`.
    pub gated_points: usize,
    /// Corner writes if every point updated the 4D table.
    pub writes_ungated: u64,
    /// Corner writes from points that pass the mask gate.
    pub writes_gated: u64,
    pub levels: Vec<LevelStats>,
}

/// Marches `n_rays` uniformly drawn training rays through `model` and counts
/// the 4D-table slots their quadrature points would update.
pub fn write_stats(model: &Model<f32>, dataset: &SceneDataset, n_rays: usize, gate_epsilon: f64, seed: u64) -> Result<WriteStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = &model.field.table4d;
    let levels = table.config.levels;
    let corners = table.config.corners();
    let mut ungated_keys: Vec<Vec<[u32; 4]>> = vec![Vec::new(); levels];
    let mut gated_keys: Vec<Vec<[u32; 4]>> = vec![Vec::new(); levels];
    let mut tape = RayTape::default();
    let (mut points, mut gated_points) = (0usize, 0usize);
    let has_mask = model.field.config.has_mask();
    for _ in 0..n_rays {
        let ci = dataset.train[rng.random_range(0..dataset.train.len())];
        let cam = &dataset.cameras[ci].camera;
        let ray = cam.pixel_ray(rng.random_range(0..cam.width), rng.random_range(0..cam.height))?;
        let t = dataset.time_of(rng.random_range(0..dataset.frame_count));
        model.ray_forward(&ray, t, None, false, &mut tape)?;
        if !tape.hit {
            continue;
        }
        for (i, &s) in tape.mid.iter().enumerate() {
            let x = model.bounds.normalize(ray.at(s)).map(|v| v.clamp(0.0, 1.0));
            let coords = [x[0], x[1], x[2], t.clamp(0.0, 1.0)];
            let pass = !has_mask || (1.0 - tape.eval.m[i] as f64) > gate_epsilon;
            points += 1;
            gated_points += pass as usize;
            for (l, lay) in table.layout.iter().enumerate() {
                let mut base = [0u32; 4];
                for d in 0..4 {
                    let n = lay.res[d];
                    if n >= 2 {
                        base[d] = ((coords[d] * (n - 1) as f64).floor() as u32).min(n - 2);
                    }
                }
                for c in 0..corners {
                    let mut k = base;
                    for (d, kd) in k.iter_mut().enumerate() {
                        if (c >> d) & 1 == 1 && lay.res[d] >= 2 {
                            *kd += 1;
                        }
                    }
                    ungated_keys[l].push(k);
                    if pass {
                        gated_keys[l].push(k);
                    }
                }
            }
        }
    }
    let per_point = (levels * corners) as u64;
    let levels_out = (0..levels)
        .map(|l| {
            let lay = &table.layout[l];
            LevelStats {
                level: l,
                res: lay.res,
                dense: lay.dense,
                slot_count: lay.slot_count,
                ungated: table.collision_stats(l, &dedup(&ungated_keys[l])).into(),
                gated: table.collision_stats(l, &dedup(&gated_keys[l])).into(),
            }
        })
        .collect();
    Ok(WriteStats {
        mode: model.mode(),
        rays: n_rays,
        points,
        gate_epsilon,
        gated_points,
        writes_ungated: points as u64 * per_point,
        writes_gated: gated_points as u64 * per_point,
        levels: levels_out,
    })
}

fn dedup(keys: &[[u32; 4]]) -> Vec<[u32; 4]> {
    let mut seen = HashSet::with_capacity(keys.len());
    keys.iter().copied().filter(|k| seen.insert(*k)).collect()
}
