//! Closed-form scenes and their brute-force rendering oracle.
//!
//! Primitives have a constant interior density that ramps linearly to zero
//! over a thin shell of width `soft` around the surface, so quadrature
//! converges smoothly. Colors mix by density where primitives overlap.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::camera::{dot, sub};
use crate::render::{composite_weights, render_frame, Aabb, Image, PinholeCamera, Ray, RayField, RayOutput, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half: [f64; 3] },
    /// Fills all of space (clipped by the scene bounds).
    Everywhere,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Static,
    /// Circle of `radius` around `pivot` in the plane spanned by `u` and `v`;
    /// `turns` revolutions over normalized time `[0, 1]`.
    Orbit {
        pivot: [f64; 3],
        radius: f64,
        u: [f64; 3],
        v: [f64; 3],
        turns: f64,
        phase: f64,
    },
    Linear { from: [f64; 3], to: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Flat,
    /// `color · (1 − a + a·s)` with `s` a product of sinusoids of the
    /// primitive-local position at `freq` cycles per unit.
    Stripes { freq: f64, amplitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Centre at `t = 0` for static primitives; ignored for moving ones.
    pub center: [f64; 3],
    pub motion: Motion,
    pub density: f64,
    pub color: [f64; 3],
    pub texture: Texture,
    pub soft: f64,
}

impl Primitive {
    pub fn is_dynamic(&self) -> bool {
        !matches!(self.motion, Motion::Static)
    }

    pub fn center_at(&self, t: f64) -> [f64; 3] {
        match self.motion {
            Motion::Static => self.center,
            Motion::Orbit {
                pivot,
                radius,
                u,
                v,
                turns,
                phase,
            } => {
                let a = phase + TAU * turns * t;
                let (s, c) = a.sin_cos();
                [
                    pivot[0] + radius * (c * u[0] + s * v[0]),
                    pivot[1] + radius * (c * u[1] + s * v[1]),
                    pivot[2] + radius * (c * u[2] + s * v[2]),
                ]
            }
            Motion::Linear { from, to } => [
                from[0] + t * (to[0] - from[0]),
                from[1] + t * (to[1] - from[1]),
                from[2] + t * (to[2] - from[2]),
            ],
        }
    }

    /// Signed distance (negative inside; exact for spheres, the usual box SDF).
    fn sdf(&self, p: [f64; 3], c: [f64; 3]) -> f64 {
        let q = sub(p, c);
        match self.shape {
            Shape::Sphere { radius } => dot(q, q).sqrt() - radius,
            Shape::Box { half } => {
                let d = [q[0].abs() - half[0], q[1].abs() - half[1], q[2].abs() - half[2]];
                let outside = [d[0].max(0.0), d[1].max(0.0), d[2].max(0.0)];
                dot(outside, outside).sqrt() + d[0].max(d[1]).max(d[2]).min(0.0)
            }
            Shape::Everywhere => f64::NEG_INFINITY,
        }
    }

    /// Occupancy in `[0, 1]`: 1 inside, linear ramp across the shell.
    pub fn occupancy(&self, p: [f64; 3], t: f64) -> f64 {
        let d = self.sdf(p, self.center_at(t));
        if self.soft <= 0.0 {
            return if d <= 0.0 { 1.0 } else { 0.0 };
        }
        (0.5 - d / self.soft).clamp(0.0, 1.0)
    }

    pub fn color_at(&self, p: [f64; 3], t: f64) -> [f64; 3] {
        match self.texture {
            Texture::Flat => self.color,
            Texture::Stripes { freq, amplitude } => {
                let q = sub(p, self.center_at(t));
                let s = 0.5
                    + 0.5 * (TAU * freq * q[0]).sin() * (TAU * freq * q[1]).cos()
                    + 0.25 * (TAU * freq * 0.5 * q[2]).sin();
                let k = (1.0 - amplitude + amplitude * s.clamp(0.0, 1.0)).clamp(0.0, 1.0);
                self.color.map(|c| (c * k).clamp(0.0, 1.0))
            }
        }
    }

    /// Ray parameter range where the primitive (plus shell) can be nonzero
    /// at time `t`; conservative.
    fn ray_interval(&self, ray: &Ray, t: f64) -> Option<(f64, f64)> {
        let c = self.center_at(t);
        let pad = self.soft.max(0.0);
        let half = match self.shape {
            Shape::Everywhere => return Some((f64::NEG_INFINITY, f64::INFINITY)),
            Shape::Sphere { radius } => [radius + pad; 3],
            Shape::Box { half } => [half[0] + pad, half[1] + pad, half[2] + pad],
        };
        let b = Aabb {
            min: [c[0] - half[0], c[1] - half[1], c[2] - half[2]],
            max: [c[0] + half[0], c[1] + half[1], c[2] + half[2]],
        };
        let r = Ray {
            near: f64::NEG_INFINITY,
            far: f64::INFINITY,
            ..*ray
        };
        b.clip(&r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub bounds: Aabb,
    pub primitives: Vec<Primitive>,
    /// Quadrature samples per ray for [`RayField`] rendering.
    #[serde(default = "default_oracle_samples")]
    pub samples: usize,
}

fn default_oracle_samples() -> usize {
    4096
}

impl AnalyticScene {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.density >= 0.0 && p.density.is_finite()) {
                return Err(Error::Config(format!("primitive {i}: density must be finite and >= 0")));
            }
            if p.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::Config(format!("primitive {i}: color outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn has_motion(&self) -> bool {
        self.primitives.iter().any(|p| p.is_dynamic())
    }

    /// `(σ, c)` at world point `p`, normalized time `t`.
    pub fn eval(&self, p: [f64; 3], t: f64) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        for prim in &self.primitives {
            let occ = prim.occupancy(p, t);
            if occ <= 0.0 {
                continue;
            }
            let s = prim.density * occ;
            let c = prim.color_at(p, t);
            sigma += s;
            for k in 0..3 {
                acc[k] += s * c[k];
            }
        }
        if sigma > 0.0 {
            (sigma, acc.map(|a| a / sigma))
        } else {
            (0.0, [0.0; 3])
        }
    }

    /// Midpoint quadrature with `n` equal intervals over the ray's
    /// `[near, far]` clipped to the scene bounds. Samples outside every
    /// primitive's support have zero density and are skipped, which leaves
    /// the composite unchanged.
    pub fn render_ray_n(&self, ray: &Ray, t: f64, n: usize) -> RayOutput {
        let Some((a, b)) = self.bounds.clip(ray) else {
            return RayOutput::default();
        };
        let spans: Vec<(f64, f64)> = self.primitives.iter().filter_map(|p| p.ray_interval(ray, t)).collect();
        if spans.is_empty() {
            return RayOutput::default();
        }
        let h = (b - a) / n as f64;
        let mut sig = Vec::new();
        let mut rgb = Vec::new();
        let mut mid = Vec::new();
        for i in 0..n {
            let s = a + h * (i as f64 + 0.5);
            if !spans.iter().any(|&(lo, hi)| s >= lo && s <= hi) {
                continue;
            }
            let (sg, c) = self.eval(ray.at(s), t);
            if sg > 0.0 {
                sig.push(sg);
                rgb.extend(c);
                mid.push(s);
            }
        }
        let delta = vec![h; sig.len()];
        let mut w = Weights::default();
        composite_weights(&sig, &delta, &mut w);
        let mut out = RayOutput {
            opacity: w.sum(),
            ..Default::default()
        };
        for (i, &wi) in w.w.iter().enumerate() {
            for k in 0..3 {
                out.rgb[k] += wi * rgb[i * 3 + k];
            }
            out.depth += wi * mid[i];
        }
        out
    }

    /// True iff some moving primitive's surface crosses `ray` at time `t`
    /// (exact ray–sphere / ray–box test, ignoring the soft shell).
    pub fn ray_hits_moving(&self, ray: &Ray, t: f64) -> bool {
        let r = Ray {
            near: f64::NEG_INFINITY,
            far: f64::INFINITY,
            ..*ray
        };
        let Some((a, b)) = self.bounds.clip(ray) else {
            return false;
        };
        self.primitives.iter().filter(|p| p.is_dynamic()).any(|p| {
            let c = p.center_at(t);
            let hit = match p.shape {
                Shape::Sphere { radius } => {
                    let oc = sub(r.origin, c);
                    let bq = dot(oc, r.direction);
                    let disc = bq * bq - (dot(oc, oc) - radius * radius);
                    (disc >= 0.0).then(|| (-bq - disc.sqrt(), -bq + disc.sqrt()))
                }
                Shape::Box { half } => Aabb {
                    min: [c[0] - half[0], c[1] - half[1], c[2] - half[2]],
                    max: [c[0] + half[0], c[1] + half[1], c[2] + half[2]],
                }
                .clip(&r),
                Shape::Everywhere => Some((f64::NEG_INFINITY, f64::INFINITY)),
            };
            matches!(hit, Some((lo, hi)) if hi >= a && lo <= b)
        })
    }
}

impl RayField for AnalyticScene {
    fn render_ray(&self, ray: &Ray, t: f64) -> Result<RayOutput> {
        Ok(self.render_ray_n(ray, t, self.samples))
    }
}

/// Brute-force render of the closed-form field at `n_samples` per ray.
pub fn oracle_render(scene: &AnalyticScene, camera: &PinholeCamera, t: f64, n_samples: usize) -> Result<Image> {
    let s = AnalyticScene {
        samples: n_samples.max(1),
        ..scene.clone()
    };
    Ok(render_frame(&s, camera, t)?.rgb)
}
