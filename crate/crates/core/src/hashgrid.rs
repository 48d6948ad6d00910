//! Multi-resolution hash grids over 3D points or 4D space-time points.
//!
//! Each level is a lattice with `res` points per spatial axis (and `time_res`
//! points along time for 4D grids); a normalized coordinate `x ∈ [0,1]` maps
//! to lattice position `x·(res−1)`. Levels whose full lattice fits in the
//! table are indexed densely, the rest through the XOR-prime spatial hash.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradBuffer, ParamBuffer};
use crate::real::Real;

/// Per-axis multipliers of the XOR hash; axis order is x, y, z, t.
pub const HASH_PRIMES: [u32; 4] = [1, 2_654_435_761, 805_459_861, 3_674_653_429];

/// Range of the uniform table initialisation.
pub const TABLE_INIT_SCALE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub dims: usize,
    pub levels: usize,
    pub features_per_level: usize,
    pub log2_table_size: u32,
    pub base_resolution: u32,
    pub max_resolution: u32,
    #[serde(default = "default_time_base")]
    pub time_base_resolution: u32,
    #[serde(default = "default_time_max")]
    pub time_max_resolution: u32,
}

fn default_time_base() -> u32 {
    2
}

fn default_time_max() -> u32 {
    32
}

impl HashGridConfig {
    pub fn new_3d(levels: usize, features: usize, log2: u32, n_min: u32, n_max: u32) -> Self {
        HashGridConfig {
            dims: 3,
            levels,
            features_per_level: features,
            log2_table_size: log2,
            base_resolution: n_min,
            max_resolution: n_max,
            time_base_resolution: default_time_base(),
            time_max_resolution: default_time_max(),
        }
    }

    pub fn new_4d(
        levels: usize,
        features: usize,
        log2: u32,
        (n_min, n_max): (u32, u32),
        (t_min, t_max): (u32, u32),
    ) -> Self {
        HashGridConfig {
            dims: 4,
            time_base_resolution: t_min,
            time_max_resolution: t_max,
            ..Self::new_3d(levels, features, log2, n_min, n_max)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("hash grid: {m} ({self:?})")));
        if self.dims != 3 && self.dims != 4 {
            return bad("dims must be 3 or 4");
        }
        if self.levels == 0 || self.features_per_level == 0 {
            return bad("levels and features_per_level must be >= 1");
        }
        if self.base_resolution == 0 || self.max_resolution < self.base_resolution {
            return bad("need max_resolution >= base_resolution >= 1");
        }
        if self.dims == 4
            && (self.time_base_resolution == 0
                || self.time_max_resolution < self.time_base_resolution)
        {
            return bad("need time_max_resolution >= time_base_resolution >= 1");
        }
        if self.log2_table_size == 0 || self.log2_table_size > 30 {
            return bad("log2_table_size must be in 1..=30");
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn corners(&self) -> usize {
        1 << self.dims
    }
}

/// `floor(n_min · b^l)` with `b = exp((ln n_max − ln n_min)/(L−1))`.
pub fn geometric_resolutions(n_min: u32, n_max: u32, levels: usize) -> Vec<u32> {
    if levels <= 1 {
        return vec![n_min; levels.max(1)];
    }
    let ln_b = ((n_max as f64).ln() - (n_min as f64).ln()) / (levels - 1) as f64;
    (0..levels)
        .map(|l| {
            let r = n_min as f64 * (ln_b * l as f64).exp();
            // The tolerance keeps exact powers (e.g. the top level) from
            // rounding down to n_max - 1.
            ((r + 1e-6).floor() as u32).min(n_max)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LevelResolution {
    pub spatial: u32,
    pub temporal: Option<u32>,
}

pub fn level_resolutions(config: &HashGridConfig) -> Vec<LevelResolution> {
    let spatial = geometric_resolutions(config.base_resolution, config.max_resolution, config.levels);
    let temporal = (config.dims == 4).then(|| {
        geometric_resolutions(
            config.time_base_resolution,
            config.time_max_resolution,
            config.levels,
        )
    });
    spatial
        .into_iter()
        .enumerate()
        .map(|(l, s)| LevelResolution {
            spatial: s,
            temporal: temporal.as_ref().map(|t| t[l]),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelLayout {
    /// Lattice points per axis, time last for 4D.
    pub res: [u32; 4],
    pub dense: bool,
    pub slot_count: usize,
    /// First slot of this level in the flat table.
    pub offset: usize,
}

#[derive(Debug, Default)]
pub struct Counter(AtomicU64);

impl Counter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

impl Clone for Counter {
    fn clone(&self) -> Self {
        Counter(AtomicU64::new(self.get()))
    }
}

/// Per-point corner slots and interpolation weights, for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct EncodeCache<R> {
    per_point: usize,
    pub slots: Vec<u32>,
    pub weights: Vec<R>,
}

impl<R: Real> EncodeCache<R> {
    pub fn clear(&mut self) {
        self.slots.clear();
        self.weights.clear();
    }

    pub fn len(&self) -> usize {
        if self.per_point == 0 {
            0
        } else {
            self.slots.len() / self.per_point
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Corner slots and weights of point `i`, level-major.
    pub fn point(&self, i: usize) -> (&[u32], &[R]) {
        let r = i * self.per_point..(i + 1) * self.per_point;
        (&self.slots[r.clone()], &self.weights[r])
    }
}

#[derive(Debug, Clone)]
pub struct HashTable<R> {
    pub config: HashGridConfig,
    pub layout: Vec<LevelLayout>,
    pub params: ParamBuffer<R>,
    /// Inputs that fell outside [0,1] and were clamped.
    pub clamped: Counter,
    /// Number of point lookups served.
    pub reads: Counter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollisionStats {
    pub queries: usize,
    pub distinct_keys: usize,
    pub distinct_slots: usize,
    pub slot_count: usize,
    pub collision_rate: f64,
    pub max_slot_load: usize,
    pub occupied_fraction: f64,
}

impl<R: Real> HashTable<R> {
    pub fn zeros(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        let table_size = 1usize << config.log2_table_size;
        let mut offset = 0;
        let layout: Vec<LevelLayout> = level_resolutions(&config)
            .into_iter()
            .map(|lr| {
                let mut res = [1u32; 4];
                res[..3].fill(lr.spatial);
                if let Some(t) = lr.temporal {
                    res[3] = t;
                }
                let dense_count: u128 = res[..config.dims].iter().map(|&r| r as u128).product();
                let dense = dense_count <= table_size as u128;
                let slot_count = if dense { dense_count as usize } else { table_size };
                let l = LevelLayout {
                    res,
                    dense,
                    slot_count,
                    offset,
                };
                offset += slot_count;
                l
            })
            .collect();
        let params = ParamBuffer::zeros(offset * config.features_per_level, true);
        Ok(HashTable {
            config,
            layout,
            params,
            clamped: Counter::default(),
            reads: Counter::default(),
        })
    }

    pub fn new<G: Rng + ?Sized>(config: HashGridConfig, rng: &mut G) -> Result<Self> {
        let mut t = Self::zeros(config)?;
        for v in &mut t.params.values {
            *v = R::c(rng.random_range(-TABLE_INIT_SCALE..TABLE_INIT_SCALE));
        }
        Ok(t)
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn total_slots(&self) -> usize {
        self.layout.iter().map(|l| l.slot_count).sum()
    }

    /// Slot of an integer lattice point at `level` (relative to that level).
    pub fn hash_index(&self, lattice_point: &[u32], level: usize) -> usize {
        let lay = &self.layout[level];
        if lay.dense {
            let mut idx = 0usize;
            let mut stride = 1usize;
            for (d, &c) in lattice_point.iter().enumerate().take(self.config.dims) {
                idx += c as usize * stride;
                stride *= lay.res[d] as usize;
            }
            idx
        } else {
            spatial_hash(lattice_point, lay.slot_count)
        }
    }

    /// Interpolated feature of one point, appended to `out`; the corner record
    /// is appended to `cache`.
    pub fn encode_push(&self, x: [R; 3], t: Option<R>, out: &mut Vec<R>, cache: &mut EncodeCache<R>) {
        let dims = self.config.dims;
        let corners = 1usize << dims;
        let f = self.config.features_per_level;
        cache.per_point = corners * self.config.levels;

        let mut coords = [R::zero(); 4];
        let mut clamped = false;
        for d in 0..3 {
            coords[d] = clamp01(x[d], &mut clamped);
        }
        if dims == 4 {
            coords[3] = clamp01(t.unwrap_or(R::zero()), &mut clamped);
        }
        if clamped {
            self.clamped.bump();
        }
        self.reads.bump();

        let values = &self.params.values;
        for lay in &self.layout {
            let mut base = [0u32; 4];
            let mut frac = [R::zero(); 4];
            for d in 0..dims {
                let n = lay.res[d];
                if n < 2 {
                    continue;
                }
                let pos = coords[d] * R::c((n - 1) as f64);
                let i0 = pos.floor().to_u32().unwrap_or(0).min(n - 2);
                base[d] = i0;
                frac[d] = pos - R::c(i0 as f64);
            }
            let start = out.len();
            out.resize(start + f, R::zero());
            let mut corner = [0u32; 4];
            for c in 0..corners {
                let mut w = R::one();
                for d in 0..dims {
                    let bit = (c >> d) & 1;
                    let hi = bit == 1 && lay.res[d] >= 2;
                    corner[d] = base[d] + hi as u32;
                    w *= if bit == 1 { frac[d] } else { R::one() - frac[d] };
                }
                let slot = lay.offset + self.level_slot(lay, &corner[..dims]);
                cache.slots.push(slot as u32);
                cache.weights.push(w);
                let entry = &values[slot * f..(slot + 1) * f];
                for k in 0..f {
                    out[start + k] += w * entry[k];
                }
            }
        }
    }

    #[inline]
    fn level_slot(&self, lay: &LevelLayout, corner: &[u32]) -> usize {
        if lay.dense {
            let mut idx = 0usize;
            let mut stride = 1usize;
            for (d, &c) in corner.iter().enumerate() {
                idx += c as usize * stride;
                stride *= lay.res[d] as usize;
            }
            idx
        } else {
            spatial_hash(corner, lay.slot_count)
        }
    }

    /// Single-point encode returning a fresh feature vector and cache.
    pub fn encode(&self, x: [R; 3], t: Option<R>) -> (Vec<R>, EncodeCache<R>) {
        let mut out = Vec::with_capacity(self.output_dim());
        let mut cache = EncodeCache::default();
        self.encode_push(x, t, &mut out, &mut cache);
        (out, cache)
    }

    /// Scatter-adds `weight · d_feature` of point `i` into `grads`.
    pub fn backward_point(&self, cache: &EncodeCache<R>, i: usize, d_feature: &[R], grads: &mut GradBuffer<R>) {
        let f = self.config.features_per_level;
        let corners = self.config.corners();
        let (slots, weights) = cache.point(i);
        for l in 0..self.config.levels {
            let d = &d_feature[l * f..(l + 1) * f];
            if d.iter().all(|&v| v == R::zero()) {
                continue;
            }
            for c in l * corners..(l + 1) * corners {
                let w = weights[c];
                if w == R::zero() {
                    continue;
                }
                let base = slots[c] as usize * f;
                for k in 0..f {
                    grads.add(base + k, w * d[k]);
                }
            }
        }
    }

    /// Backward for every point in `cache`; `d_feature` is `points × L·F`.
    pub fn encode_backward(&mut self, cache: &EncodeCache<R>, d_feature: &[R]) {
        let width = self.output_dim();
        let mut grads = self.params.take_grads();
        for i in 0..cache.len() {
            self.backward_point(cache, i, &d_feature[i * width..(i + 1) * width], &mut grads);
        }
        self.params.restore_grads(grads);
    }

    /// Slot statistics of `keys` at `level` (deterministic).
    pub fn collision_stats(&self, level: usize, keys: &[[u32; 4]]) -> CollisionStats {
        let lay = &self.layout[level];
        let dims = self.config.dims;
        let mut distinct_keys: HashSet<[u32; 4]> = HashSet::with_capacity(keys.len());
        let mut load: HashMap<usize, usize> = HashMap::with_capacity(keys.len());
        for k in keys {
            let mut key = [0u32; 4];
            key[..dims].copy_from_slice(&k[..dims]);
            if distinct_keys.insert(key) {
                *load.entry(self.hash_index(&key[..dims], level)).or_default() += 1;
            }
        }
        let distinct_slots = load.len();
        let denom = distinct_keys.len().min(lay.slot_count);
        CollisionStats {
            queries: keys.len(),
            distinct_keys: distinct_keys.len(),
            distinct_slots,
            slot_count: lay.slot_count,
            collision_rate: if denom == 0 {
                0.0
            } else {
                1.0 - distinct_slots as f64 / denom as f64
            },
            max_slot_load: load.values().copied().max().unwrap_or(0),
            occupied_fraction: distinct_slots as f64 / lay.slot_count as f64,
        }
    }

    pub fn cast<S: Real>(&self) -> HashTable<S> {
        HashTable {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.cast(),
            clamped: self.clamped.clone(),
            reads: self.reads.clone(),
        }
    }
}

/// `(⊕_i coord_i · π_i) mod slot_count` in wrapping 32-bit arithmetic.
#[inline]
pub fn spatial_hash(coords: &[u32], slot_count: usize) -> usize {
    let mut h = 0u32;
    for (c, p) in coords.iter().zip(HASH_PRIMES) {
        h ^= c.wrapping_mul(p);
    }
    h as usize % slot_count
}

#[inline]
fn clamp01<R: Real>(v: R, flag: &mut bool) -> R {
    if v < R::zero() || v.is_nan() {
        *flag = true;
        R::zero()
    } else if v > R::one() {
        *flag = true;
        R::one()
    } else {
        v
    }
}
