//! The trainable scene model and its per-ray differentiable pipeline.
//!
//! Each ray is clipped to the scene box, a coarse pass through the proposal
//! field places `n_samples` intervals, and the space-time field is composited
//! over them. The static branch runs on the same samples when the
//! uncertainty or mutual-information terms are active.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Record};
use crate::error::{Error, Result};
use crate::field::{EncodingMode, EvalOptions, FieldConfig, FieldEval, FieldGrads, FieldUpstream, SpaceTimeField};
use crate::losses::{distortion_grad, distortion_loss, recon_ray, uncertainty_ray, LossParts, LossWeights, MineEstimator};
use crate::nn::ParamBuffer;
use crate::real::Real;
use crate::render::{
    composite_weights, dynamic_weight, resample_edges, uniform_edges, weighted_color, weighted_sum, weights_backward,
    Aabb, ProposalConfig, ProposalEval, ProposalField, ProposalGrads, Ray, RayField, RayOutput, Weights,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub field: FieldConfig,
    pub proposal: ProposalConfig,
    /// Main quadrature intervals per ray.
    pub n_samples: usize,
    pub bounds: Aabb,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            field: FieldConfig::default(),
            proposal: ProposalConfig::default(),
            n_samples: 128,
            bounds: Aabb::cube(1.0),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.proposal.validate()?;
        self.bounds.validate()?;
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model<R> {
    pub field: SpaceTimeField<R>,
    pub proposal: ProposalField<R>,
    pub bounds: Aabb,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<R> {
    pub field: FieldGrads<R>,
    pub proposal: ProposalGrads<R>,
}

impl<R: Real> ModelGrads<R> {
    pub fn accumulate(&mut self, o: &ModelGrads<R>) {
        self.field.accumulate(&o.field);
        self.proposal.accumulate(&o.proposal);
    }

    pub fn zero(&mut self) {
        self.field.zero();
        self.proposal.zero();
    }
}

/// Everything one ray's forward pass keeps for its backward pass.
#[derive(Debug, Clone, Default)]
pub struct RayTape<R> {
    pub hit: bool,
    pub range: (f64, f64),
    pub with_static: bool,
    prop_edges: Vec<f64>,
    prop_x: Vec<[R; 3]>,
    prop_delta: Vec<R>,
    prop_eval: ProposalEval<R>,
    pub prop_weights: Weights<R>,
    pub edges: Vec<f64>,
    /// Interval midpoints, world units.
    pub mid: Vec<f64>,
    xs: Vec<[R; 3]>,
    delta: Vec<R>,
    pub eval: FieldEval<R>,
    pub weights: Weights<R>,
    pub rgb: [R; 3],
    pub static_weights: Weights<R>,
    pub rgb_static: [R; 3],
    pub u_ray: R,
    hist: Vec<R>,
    mine_dm: Vec<R>,
    mine_du: Vec<R>,
    d_w: Vec<R>,
    d_sigma: Vec<R>,
    d_rgb: Vec<R>,
    d_sigma_s: Vec<R>,
    d_rgb_s: Vec<R>,
    d_m: Vec<R>,
    d_u: Vec<R>,
}

impl<R> RayTape<R> {
    /// Main weights binned onto the proposal intervals, as of the last
    /// [`Model::ray_loss`] call.
    pub fn proposal_target(&self) -> &[R] {
        &self.hist
    }
}

/// Unweighted loss terms of one ray (before batch averaging).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RayLoss {
    pub recon: f64,
    pub uncertainty: f64,
    pub mask: f64,
    pub distortion: f64,
    pub proposal: f64,
}

impl<R: Real> Model<R> {
    pub fn new<G: Rng + ?Sized>(config: &ModelConfig, rng: &mut G) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            field: SpaceTimeField::new(config.field.clone(), rng)?,
            proposal: ProposalField::new(config.proposal)?,
            bounds: config.bounds,
            n_samples: config.n_samples,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            field: self.field.config.clone(),
            proposal: self.proposal.config,
            n_samples: self.n_samples,
            bounds: self.bounds,
        }
    }

    pub fn mode(&self) -> EncodingMode {
        self.field.config.mode
    }

    /// All parameter buffers, field groups first.
    pub fn groups(&self) -> Vec<(&'static str, &ParamBuffer<R>)> {
        let mut v: Vec<_> = self.field.groups().into_iter().collect();
        v.extend(self.proposal.groups());
        v
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut ParamBuffer<R>)> {
        let mut v: Vec<_> = self.field.groups_mut().into_iter().collect();
        v.extend(self.proposal.groups_mut());
        v
    }

    pub fn take_grads(&mut self) -> ModelGrads<R> {
        ModelGrads {
            field: self.field.take_grads(),
            proposal: self.proposal.take_grads(),
        }
    }

    pub fn restore_grads(&mut self, g: ModelGrads<R>) {
        self.field.restore_grads(g.field);
        self.proposal.restore_grads(g.proposal);
    }

    pub fn zero_grads_like(&self) -> ModelGrads<R> {
        ModelGrads {
            field: self.field.zero_grads_like(),
            proposal: self.proposal.zero_grads_like(),
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.groups_mut() {
            p.zero_grads();
        }
    }

    fn to_unit(&self, p: [f64; 3]) -> [R; 3] {
        let q = self.bounds.normalize(p);
        [R::c(q[0].clamp(0.0, 1.0)), R::c(q[1].clamp(0.0, 1.0)), R::c(q[2].clamp(0.0, 1.0))]
    }

    /// Proposal pass then main sample placement; returns false if the ray
    /// misses the scene box.
    fn place_samples(&self, ray: &Ray, t: f64, jitter: Option<&mut ChaCha8Rng>, tape: &mut RayTape<R>) -> bool {
        let Some((a, b)) = self.bounds.clip(ray) else {
            tape.hit = false;
            return false;
        };
        tape.hit = true;
        tape.range = (a, b);
        let nb = self.proposal.config.bins;
        tape.prop_edges = uniform_edges(a, b, nb);
        tape.prop_x.clear();
        tape.prop_delta.clear();
        for j in 0..nb {
            let (e0, e1) = (tape.prop_edges[j], tape.prop_edges[j + 1]);
            tape.prop_x.push(self.to_unit(ray.at(0.5 * (e0 + e1))));
            tape.prop_delta.push(R::c(e1 - e0));
        }
        self.proposal.forward(&tape.prop_x, R::c(t), &mut tape.prop_eval);
        composite_weights(&tape.prop_eval.sigma, &tape.prop_delta, &mut tape.prop_weights);
        let pw: Vec<f64> = tape.prop_weights.w.iter().map(|w| w.f64()).collect();
        tape.edges = resample_edges(&pw, &tape.prop_edges, self.n_samples, jitter);
        tape.mid.clear();
        tape.xs.clear();
        tape.delta.clear();
        for i in 0..self.n_samples {
            let (e0, e1) = (tape.edges[i], tape.edges[i + 1]);
            let s = 0.5 * (e0 + e1);
            tape.mid.push(s);
            tape.xs.push(self.to_unit(ray.at(s)));
            tape.delta.push(R::c(e1 - e0));
        }
        true
    }

    /// Differentiable forward pass of one ray at normalized time `t`.
    pub fn ray_forward(
        &self,
        ray: &Ray,
        t: f64,
        jitter: Option<&mut ChaCha8Rng>,
        with_static: bool,
        tape: &mut RayTape<R>,
    ) -> Result<()> {
        let with_static = with_static && self.field.config.has_static_branch();
        tape.with_static = with_static;
        if !self.place_samples(ray, t, jitter, tape) {
            return Ok(());
        }
        let dir = [R::c(ray.direction[0]), R::c(ray.direction[1]), R::c(ray.direction[2])];
        let opts = EvalOptions {
            dynamic: true,
            static_branch: with_static,
            uncertainty: with_static,
        };
        self.field.forward(&tape.xs, dir, R::c(t), opts, &mut tape.eval)?;
        composite_weights(&tape.eval.sigma, &tape.delta, &mut tape.weights);
        tape.rgb = weighted_color(&tape.weights.w, &tape.eval.rgb);
        if with_static {
            composite_weights(&tape.eval.sigma_s, &tape.delta, &mut tape.static_weights);
            tape.rgb_static = weighted_color(&tape.static_weights.w, &tape.eval.rgb_s);
            tape.u_ray = weighted_sum(&tape.static_weights.w, &tape.eval.u);
        }
        Ok(())
    }

    fn normalized_intervals(&self, tape: &RayTape<R>) -> (Vec<R>, Vec<R>) {
        let (a, b) = tape.range;
        let len = b - a;
        let s = tape.mid.iter().map(|&m| R::c((m - a) / len)).collect();
        let d = tape.delta.iter().map(|&d| R::c(d.f64() / len)).collect();
        (s, d)
    }

    /// Main weights redistributed onto the proposal bins by interval overlap.
    fn weight_histogram(tape: &RayTape<R>) -> Vec<R> {
        let pe = &tape.prop_edges;
        let me = &tape.edges;
        let nb = pe.len() - 1;
        let mut hist = vec![R::zero(); nb];
        let mut j = 0;
        for i in 0..tape.weights.w.len() {
            let (lo, hi) = (me[i], me[i + 1]);
            let w = tape.weights.w[i];
            if hi <= lo {
                hist[j.min(nb - 1)] += w;
                continue;
            }
            while j + 1 < hist.len() && pe[j + 1] <= lo {
                j += 1;
            }
            let mut k = j;
            while k < hist.len() && pe[k] < hi {
                let overlap = hi.min(pe[k + 1]) - lo.max(pe[k]);
                if overlap > 0.0 {
                    hist[k] += w * R::c(overlap / (hi - lo));
                }
                k += 1;
            }
        }
        hist
    }

    /// Loss terms of one ray after [`Self::ray_forward`].
    ///
    /// Also records the proposal target (see [`RayTape::proposal_target`]).
    pub fn ray_loss(&self, tape: &mut RayTape<R>, target: [f64; 3]) -> RayLoss {
        let c = [R::c(target[0]), R::c(target[1]), R::c(target[2])];
        if !tape.hit {
            return RayLoss {
                recon: recon_ray([R::zero(); 3], c).0.f64(),
                ..Default::default()
            };
        }
        let mut out = RayLoss {
            recon: recon_ray(tape.rgb, c).0.f64(),
            ..Default::default()
        };
        if tape.with_static {
            out.uncertainty = uncertainty_ray(c, tape.rgb_static, tape.u_ray).loss.f64();
        }
        if self.mode() == EncodingMode::Masked {
            let n = tape.eval.m.len() as f64;
            out.mask = tape.eval.m.iter().map(|&m| 1.0 - m.f64()).sum::<f64>() / n;
        }
        let (s, d) = self.normalized_intervals(tape);
        out.distortion = distortion_loss(&tape.weights.w, &s, &d).f64();
        tape.hist = Self::weight_histogram(tape);
        out.proposal = tape
            .prop_weights
            .w
            .iter()
            .zip(&tape.hist)
            .map(|(&p, &h)| (p - h).f64().powi(2))
            .sum();
        out
    }

    /// Accumulates `scale · ∂(weighted ray loss)` into `g`. Mutual-information
    /// gradients, if any, must already sit in the tape (see [`batch_gradients`]).
    pub fn ray_backward(
        &self,
        tape: &mut RayTape<R>,
        target: [f64; 3],
        lw: &LossWeights,
        scale: R,
        g: &mut ModelGrads<R>,
    ) -> Result<()> {
        if !tape.hit {
            return Ok(());
        }
        let n = tape.mid.len();
        let c = [R::c(target[0]), R::c(target[1]), R::c(target[2])];
        let (_, d_rgb_ray) = recon_ray(tape.rgb, c);
        let d_rgb_ray = d_rgb_ray.map(|v| v * scale);

        // dynamic branch
        tape.d_w.clear();
        tape.d_rgb.clear();
        for i in 0..n {
            let ci = &tape.eval.rgb[i * 3..i * 3 + 3];
            tape.d_w.push(d_rgb_ray[0] * ci[0] + d_rgb_ray[1] * ci[1] + d_rgb_ray[2] * ci[2]);
            let wi = tape.weights.w[i];
            tape.d_rgb.extend(d_rgb_ray.map(|d| wi * d));
        }
        if lw.lambda_dist > 0.0 {
            let (s, d) = self.normalized_intervals(tape);
            distortion_grad(&tape.weights.w, &s, &d, scale * R::c(lw.lambda_dist), &mut tape.d_w);
        }
        weights_backward(&tape.weights, &tape.delta, &tape.d_w, &mut tape.d_sigma);

        // static branch and uncertainty
        tape.d_sigma_s.clear();
        tape.d_rgb_s.clear();
        tape.d_u.clear();
        if tape.with_static {
            let term = uncertainty_ray(c, tape.rgb_static, tape.u_ray);
            let k = scale * R::c(lw.lambda_u);
            let d_cs = term.d_static_color.map(|v| v * k);
            let d_uray = term.d_u * k;
            let mut d_ws = Vec::with_capacity(n);
            for i in 0..n {
                let ci = &tape.eval.rgb_s[i * 3..i * 3 + 3];
                d_ws.push(d_cs[0] * ci[0] + d_cs[1] * ci[1] + d_cs[2] * ci[2] + d_uray * tape.eval.u[i]);
                let wi = tape.static_weights.w[i];
                tape.d_rgb_s.extend(d_cs.map(|d| wi * d));
                let mine = tape.mine_du.get(i).copied().unwrap_or(R::zero());
                tape.d_u.push(wi * d_uray + mine);
            }
            weights_backward(&tape.static_weights, &tape.delta, &d_ws, &mut tape.d_sigma_s);
        }

        // mask: sparsity plus mutual information
        tape.d_m.clear();
        if self.mode() == EncodingMode::Masked {
            let ds = -scale * R::c(lw.lambda_mask) / R::c(n as f64);
            for i in 0..n {
                tape.d_m.push(ds + tape.mine_dm.get(i).copied().unwrap_or(R::zero()));
            }
        }

        let up = FieldUpstream {
            d_sigma: Some(&tape.d_sigma),
            d_rgb: Some(&tape.d_rgb),
            d_sigma_s: tape.with_static.then_some(tape.d_sigma_s.as_slice()),
            d_rgb_s: tape.with_static.then_some(tape.d_rgb_s.as_slice()),
            d_m: (!tape.d_m.is_empty()).then_some(tape.d_m.as_slice()),
            d_u: tape.with_static.then_some(tape.d_u.as_slice()),
        };
        self.field.backward(&mut tape.eval, &up, &mut g.field)?;

        // proposal matches the (stop-gradient) histogram of main weights
        if lw.lambda_prop > 0.0 {
            let k = scale * R::c(2.0 * lw.lambda_prop);
            let d_wp: Vec<R> = tape
                .prop_weights
                .w
                .iter()
                .zip(&tape.hist)
                .map(|(&p, &h)| k * (p - h))
                .collect();
            let mut d_sp = Vec::new();
            weights_backward(&tape.prop_weights, &tape.prop_delta, &d_wp, &mut d_sp);
            self.proposal.backward(&tape.prop_eval, &d_sp, &mut g.proposal);
        }
        Ok(())
    }

    /// Inference render of one ray (no jitter, dynamic branch only).
    pub fn shade(&self, ray: &Ray, t: f64) -> Result<RayOutput> {
        let mut tape = RayTape::default();
        if !self.place_samples(ray, t, None, &mut tape) {
            return Ok(RayOutput::default());
        }
        let dir = [R::c(ray.direction[0]), R::c(ray.direction[1]), R::c(ray.direction[2])];
        self.field.forward(&tape.xs, dir, R::c(t), EvalOptions::DYNAMIC, &mut tape.eval)?;
        composite_weights(&tape.eval.sigma, &tape.delta, &mut tape.weights);
        let rgb = weighted_color(&tape.weights.w, &tape.eval.rgb);
        let w = &tape.weights.w;
        let m: Vec<R> = if tape.eval.m.is_empty() {
            vec![R::zero(); w.len()]
        } else {
            tape.eval.m.clone()
        };
        Ok(RayOutput {
            rgb: rgb.map(|v| v.f64()),
            depth: w.iter().zip(&tape.mid).map(|(&wi, &s)| wi.f64() * s).sum(),
            dynamic_weight: dynamic_weight(w, &m).f64(),
            opacity: tape.weights.sum().f64(),
        })
    }

    /// Static-branch render: `(Ĉ_s, U)`; `None` for fields without one.
    pub fn shade_static(&self, ray: &Ray) -> Result<Option<([f64; 3], f64)>> {
        if !self.field.config.has_static_branch() {
            return Ok(None);
        }
        let mut tape = RayTape::default();
        self.ray_forward(ray, 0.0, None, true, &mut tape)?;
        if !tape.hit {
            return Ok(Some(([0.0; 3], 0.0)));
        }
        Ok(Some((tape.rgb_static.map(|v| v.f64()), tape.u_ray.f64())))
    }

    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            field: self.field.cast(),
            proposal: self.proposal.cast(),
            bounds: self.bounds,
            n_samples: self.n_samples,
        }
    }

    pub fn save_into(&self, c: &mut Container, prefix: &str) -> Result<()> {
        self.field.save_into(c, &format!("{prefix}.field"))?;
        self.proposal.save_into(c, &format!("{prefix}.proposal"))?;
        let extra = serde_json::json!({ "bounds": self.bounds, "n_samples": self.n_samples });
        c.insert(format!("{prefix}.render"), Record::from_bytes(&serde_json::to_vec(&extra)?));
        Ok(())
    }

    pub fn load_from(c: &Container, prefix: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Extra {
            bounds: Aabb,
            n_samples: usize,
        }
        let extra: Extra = serde_json::from_slice(&c.get(&format!("{prefix}.render"))?.payload)?;
        Ok(Model {
            field: SpaceTimeField::load_from(c, &format!("{prefix}.field"))?,
            proposal: ProposalField::load_from(c, &format!("{prefix}.proposal"))?,
            bounds: extra.bounds,
            n_samples: extra.n_samples,
        })
    }
}

impl<R: Real> RayField for Model<R> {
    fn render_ray(&self, ray: &Ray, t: f64) -> Result<RayOutput> {
        self.shade(ray, t)
    }

    fn ray_has_dynamic_point(&self, ray: &Ray, epsilon: f64) -> bool {
        if !self.field.config.has_mask() {
            return true;
        }
        let Some((a, b)) = self.bounds.clip(ray) else {
            return false;
        };
        // scan at the mask grid's own spacing
        let res = self.field.config.mask_resolution as f64;
        let ext = (0..3)
            .map(|k| self.bounds.max[k] - self.bounds.min[k])
            .fold(f64::INFINITY, f64::min);
        let step = 0.5 * ext / (res - 1.0);
        let n = (((b - a) / step).ceil() as usize).max(1);
        let eps = R::c(epsilon);
        (0..n).any(|i| {
            let s = a + (b - a) * (i as f64 + 0.5) / n as f64;
            self.field.mask_value(self.to_unit(ray.at(s))) < eps
        })
    }
}

/// One training batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchInput<'a> {
    pub rays: &'a [Ray],
    /// Normalized times.
    pub times: &'a [f64],
    pub targets: &'a [[f64; 3]],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    pub weights: LossWeights,
    /// Seed for per-ray sample jitter; `None` places samples deterministically.
    pub jitter_seed: Option<u64>,
    /// Pairs fed to the mutual-information critic; 0 uses every sample.
    pub mine_pairs: usize,
    /// Gradient workers; results depend on this count but not on scheduling.
    pub workers: usize,
}

/// Reusable per-batch buffers.
#[derive(Debug, Default)]
pub struct BatchWorkspace<R> {
    pub tapes: Vec<RayTape<R>>,
    extra: Vec<ModelGrads<R>>,
}

/// Forward, loss and backward over a batch. Leaves `∂L` in the model's and
/// the critic's gradient buffers (which the caller zeroes between steps) and
/// returns the batch-averaged loss terms.
pub fn batch_gradients<R: Real, G: Rng + ?Sized>(
    model: &mut Model<R>,
    mine: Option<&mut MineEstimator<R>>,
    input: BatchInput<'_>,
    opts: &BatchOptions,
    rng: &mut G,
    ws: &mut BatchWorkspace<R>,
) -> Result<LossParts> {
    let b = input.rays.len();
    crate::error::check_dim("batch times", b, input.times.len())?;
    crate::error::check_dim("batch targets", b, input.targets.len())?;
    if b == 0 {
        return Err(Error::Config("empty ray batch".into()));
    }
    let lw = opts.weights;
    let workers = opts.workers.max(1).min(b);
    let chunk = b.div_ceil(workers);
    let with_static = model.field.config.has_static_branch() && (lw.lambda_u > 0.0 || lw.gamma > 0.0);
    ws.tapes.resize_with(b, RayTape::default);
    ws.tapes.truncate(b);

    {
        let model = &*model;
        let results: Vec<Result<()>> = ws
            .tapes
            .par_chunks_mut(chunk)
            .enumerate()
            .map(|(ci, tapes)| {
                for (k, tape) in tapes.iter_mut().enumerate() {
                    let i = ci * chunk + k;
                    let mut jr = opts.jitter_seed.map(|s| {
                        let mut r = ChaCha8Rng::seed_from_u64(s);
                        r.set_stream(i as u64);
                        r
                    });
                    model.ray_forward(&input.rays[i], input.times[i], jr.as_mut(), with_static, tape)?;
                    tape.mine_dm.clear();
                    tape.mine_du.clear();
                }
                Ok(())
            })
            .collect();
        results.into_iter().collect::<Result<()>>()?;
    }

    let mut parts = LossParts::default();
    for (tape, target) in ws.tapes.iter_mut().zip(input.targets) {
        let l = model.ray_loss(tape, *target);
        parts.recon += l.recon;
        parts.uncertainty += l.uncertainty;
        parts.mask += l.mask;
        parts.distortion += l.distortion;
        parts.proposal += l.proposal;
    }
    let inv_b = 1.0 / b as f64;
    parts.recon *= inv_b;
    parts.uncertainty *= inv_b;
    parts.mask *= inv_b;
    parts.distortion *= inv_b;
    parts.proposal *= inv_b;

    if let (Some(mine), true) = (mine, with_static && model.mode() == EncodingMode::Masked) {
        let mut pairs: Vec<(u32, u32)> = Vec::new();
        for (ri, tape) in ws.tapes.iter().enumerate() {
            if tape.hit {
                pairs.extend((0..tape.eval.m.len() as u32).map(|si| (ri as u32, si)));
            }
        }
        if opts.mine_pairs > 0 && pairs.len() > opts.mine_pairs {
            let mut pick = sample_indices(rng, pairs.len(), opts.mine_pairs).into_vec();
            pick.sort_unstable();
            pairs = pick.into_iter().map(|k| pairs[k]).collect();
        }
        let m: Vec<R> = pairs.iter().map(|&(r, s)| ws.tapes[r as usize].eval.m[s as usize]).collect();
        let u: Vec<R> = pairs.iter().map(|&(r, s)| ws.tapes[r as usize].eval.u[s as usize]).collect();
        if lw.gamma > 0.0 {
            if let Some(out) = mine.estimate(&m, &u, R::c(-lw.gamma), rng)? {
                parts.mutual_info = out.value.f64();
                for tape in ws.tapes.iter_mut().filter(|t| t.hit) {
                    let n = tape.eval.m.len();
                    tape.mine_dm.resize(n, R::zero());
                    tape.mine_du.resize(n, R::zero());
                }
                for (k, &(r, s)) in pairs.iter().enumerate() {
                    ws.tapes[r as usize].mine_dm[s as usize] += out.d_m[k];
                    ws.tapes[r as usize].mine_du[s as usize] += out.d_u[k];
                }
            }
        } else if m.len() >= 2 {
            parts.mutual_info = mine.value(&m, &u, 1, rng)?.f64();
        }
    }

    let scale = R::c(inv_b);
    while ws.extra.len() + 1 < workers {
        ws.extra.push(model.zero_grads_like());
    }
    let mut g0 = model.take_grads();
    let result = {
        let model = &*model;
        let mut outs: Vec<&mut ModelGrads<R>> = std::iter::once(&mut g0).chain(ws.extra.iter_mut().take(workers - 1)).collect();
        let results: Vec<Result<()>> = ws
            .tapes
            .par_chunks_mut(chunk)
            .zip(outs.par_iter_mut())
            .enumerate()
            .map(|(ci, (tapes, g))| {
                for (k, tape) in tapes.iter_mut().enumerate() {
                    model.ray_backward(tape, input.targets[ci * chunk + k], &lw, scale, g)?;
                }
                Ok(())
            })
            .collect();
        results.into_iter().collect::<Result<()>>()
    };
    for e in ws.extra.iter_mut().take(workers - 1) {
        g0.accumulate(e);
        e.zero();
    }
    model.restore_grads(g0);
    result?;
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashgrid::HashGridConfig;
    use crate::render::PinholeCamera;

    pub(crate) fn tiny_model_config(mode: EncodingMode) -> ModelConfig {
        ModelConfig {
            field: FieldConfig {
                grid3: HashGridConfig::new_3d(2, 2, 8, 4, 12),
                grid4: HashGridConfig::new_4d(2, 2, 8, (4, 12), (2, 4)),
                mask_resolution: 6,
                uncertainty_resolution: 5,
                u_m: 0.03,
                density_hidden: 8,
                density_hidden_layers: 1,
                geo_feat_dim: 3,
                color_hidden: 8,
                color_hidden_layers: 1,
                sh_degree: 2,
                mode,
            },
            proposal: ProposalConfig {
                bins: 8,
                res3: 5,
                res4: 4,
                time_res: 3,
            },
            n_samples: 6,
            bounds: Aabb::cube(1.0),
        }
    }

    fn rays() -> Vec<Ray> {
        let cam = PinholeCamera::look_at(8, 8, 6.0, [0.3, 0.2, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 0.5, 6.0);
        (0..4).map(|i| cam.generate_ray(2.0 + i as f64, 3.0 + (i % 2) as f64)).collect()
    }

    #[test]
    fn tape_partition_and_placement() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::<f64>::new(&tiny_model_config(EncodingMode::Masked), &mut rng).unwrap();
        let mut tape = RayTape::default();
        let ray = rays()[0];
        m.ray_forward(&ray, 0.4, Some(&mut rng), true, &mut tape).unwrap();
        assert!(tape.hit);
        assert_eq!(tape.mid.len(), 6);
        assert!(tape.mid.windows(2).all(|p| p[1] > p[0]));
        assert!((tape.weights.sum() + tape.weights.t_final() - 1.0).abs() < 1e-9);
        let (a, b) = tape.range;
        assert!((tape.edges[0] - a).abs() < 1e-12 && (tape.edges[6] - b).abs() < 1e-12);
        // histogram conserves weight
        let l = m.ray_loss(&mut tape, [0.2, 0.3, 0.4]);
        let hsum: f64 = tape.hist.iter().sum();
        assert!((hsum - tape.weights.sum()).abs() < 1e-9);
        assert!(l.proposal >= 0.0);
    }

    #[test]
    fn missing_rays_render_black() {
        let m = Model::<f64>::new(&tiny_model_config(EncodingMode::Masked), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ray = Ray {
            origin: [5.0, 5.0, 5.0],
            direction: [1.0, 0.0, 0.0],
            near: 0.1,
            far: 10.0,
        };
        assert_eq!(m.shade(&ray, 0.0).unwrap(), RayOutput::default());
    }

    #[test]
    fn worker_count_does_not_change_gradients_much() {
        let cfg = tiny_model_config(EncodingMode::Masked);
        let rays = rays();
        let times = [0.1, 0.5, 0.9, 0.3];
        let targets = [[0.2, 0.4, 0.6], [0.9, 0.1, 0.1], [0.0, 0.0, 0.0], [0.5; 3]];
        let run = |workers| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut m = Model::<f64>::new(&cfg, &mut rng).unwrap();
            let mut mine = MineEstimator::new(8, 0.99, &mut rng).unwrap();
            let opts = BatchOptions {
                weights: LossWeights::default(),
                jitter_seed: Some(11),
                mine_pairs: 0,
                workers,
            };
            let mut ws = BatchWorkspace::default();
            let input = BatchInput {
                rays: &rays,
                times: &times,
                targets: &targets,
            };
            let parts = batch_gradients(&mut m, Some(&mut mine), input, &opts, &mut rng, &mut ws).unwrap();
            let g: Vec<Vec<f64>> = m.groups().iter().map(|(_, p)| p.grads.data.clone()).collect();
            (parts, g)
        };
        let (p1, g1) = run(1);
        let (p1b, g1b) = run(1);
        assert_eq!(p1, p1b);
        assert_eq!(g1, g1b);
        let (p3, g3) = run(3);
        assert_eq!(p1, p3);
        for (a, b) in g1.iter().zip(&g3) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
        assert!(p1.recon > 0.0 && p1.proposal >= 0.0 && p1.mask > 0.0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = Model::<f32>::new(&tiny_model_config(EncodingMode::Additive), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut c = Container::new();
        m.save_into(&mut c, "model").unwrap();
        let back = Model::<f32>::load_from(&c, "model").unwrap();
        assert_eq!(back.config(), m.config());
        let ray = rays()[1];
        assert_eq!(back.shade(&ray, 0.3).unwrap(), m.shade(&ray, 0.3).unwrap());
    }
}
