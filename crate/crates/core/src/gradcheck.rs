//! Finite-difference verification of the analytic gradients.
//!
//! The full-pipeline check perturbs every parameter of the six field groups
//! and the critic in a 64-bit copy of a model, holding sample placement
//! fixed. The proposal's own objective is checked separately against a
//! frozen target histogram, since its parameters also move the samples.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::{EncodingMode, FieldConfig};
use crate::hashgrid::HashGridConfig;
use crate::losses::{LossWeights, MineEstimator};
use crate::model::{batch_gradients, BatchInput, BatchOptions, BatchWorkspace, Model, ModelConfig, RayTape};
use crate::nn::ParamBuffer;
use crate::render::{composite_weights, Aabb, PinholeCamera, ProposalConfig, ProposalEval, Ray, Weights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.groups.iter().all(|g| g.checked > 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub rays: usize,
    pub samples: usize,
    pub step: f64,
    /// Gradients smaller than this are compared absolutely.
    pub floor: f64,
    /// Untouched entries sampled per group to confirm they stay zero.
    pub untouched_probes: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            rays: 2,
            samples: 4,
            step: 1e-6,
            floor: 1e-6,
            untouched_probes: 16,
            seed: 0,
        }
    }
}

/// Loss weights for the check: every term at unit-order weight so none is
/// drowned out, and no proposal term.
pub fn check_weights() -> LossWeights {
    LossWeights {
        lambda_u: 0.5,
        gamma: 0.5,
        lambda_mask: 0.2,
        lambda_dist: 0.1,
        lambda_prop: 0.0,
    }
}

fn rel_err(a: f64, f: f64, floor: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(floor)
}

struct Fixture {
    rays: Vec<Ray>,
    times: Vec<f64>,
    targets: Vec<[f64; 3]>,
}

fn fixture(n: usize, seed: u64) -> Fixture {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let cam = PinholeCamera::look_at(16, 16, 12.0, [0.4, 0.3, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 0.5, 6.0);
    let rays = (0..n)
        .map(|_| cam.generate_ray(rng.random_range(4.0..12.0), rng.random_range(4.0..12.0)))
        .collect();
    let times = (0..n).map(|_| rng.random()).collect();
    let targets = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    Fixture { rays, times, targets }
}

fn evaluate(
    model: &mut Model<f64>,
    mine: &mut MineEstimator<f64>,
    fx: &Fixture,
    lw: &LossWeights,
    seed: u64,
    ws: &mut BatchWorkspace<f64>,
) -> Result<f64> {
    let opts = BatchOptions {
        weights: *lw,
        jitter_seed: None,
        mine_pairs: 0,
        workers: 1,
    };
    let input = BatchInput {
        rays: &fx.rays,
        times: &fx.times,
        targets: &fx.targets,
    };
    // same seed each call: identical permutation of the marginal pairs
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = batch_gradients(model, Some(mine), input, &opts, &mut rng, ws)?;
    Ok(parts.total(lw))
}

fn probe_indices(p: &ParamBuffer<f64>, probes: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = match p.grads.touched() {
        Some(t) => t.iter().map(|&i| i as usize).collect(),
        None => (0..p.len()).collect(),
    };
    idx.sort_unstable();
    if p.grads.is_sparse() && probes > 0 {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..probes {
            let j = rng.random_range(0..p.len());
            if idx.binary_search(&j).is_err() {
                idx.push(j);
            }
        }
    }
    idx
}

/// Full-pipeline check on a 64-bit shadow of a freshly initialized model.
pub fn full_pipeline_check(model_cfg: &ModelConfig, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mcfg = model_cfg.clone();
    mcfg.n_samples = cfg.samples;
    mcfg.field.mode = EncodingMode::Masked;
    let base = Model::<f32>::new(&mcfg, &mut rng)?;
    let mut model: Model<f64> = base.cast();
    // move tables and grids off their near-zero init so every path carries signal
    {
        use rand::Rng;
        for (_, p) in model.field.groups_mut() {
            for v in &mut p.values {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let mut mine = MineEstimator::<f64>::new(8, 0.0, &mut rng)?;
    // zero biases put whole rows exactly on a ReLU kink
    {
        use rand::Rng;
        for v in &mut mine.critic.params.values {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let fx = fixture(cfg.rays, cfg.seed);
    let lw = check_weights();
    let eval_seed = cfg.seed.wrapping_add(17);
    let mut ws = BatchWorkspace::default();

    model.zero_grads();
    mine.critic.params.zero_grads();
    evaluate(&mut model, &mut mine, &fx, &lw, eval_seed, &mut ws)?;
    let analytic: Vec<ParamBuffer<f64>> = model.field.groups().iter().map(|(_, p)| (*p).clone()).collect();
    let critic_grads = mine.critic.params.clone();
    model.zero_grads();
    mine.critic.params.zero_grads();

    let h = cfg.step;
    let mut reports = Vec::new();
    for (gi, name) in crate::field::FIELD_GROUPS.iter().enumerate() {
        let buf = &analytic[gi];
        let idx = probe_indices(buf, cfg.untouched_probes, cfg.seed + gi as u64);
        let mut rep = GroupReport {
            group: name.to_string(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_grad: 0.0,
        };
        for j in idx {
            let orig = model.field.groups()[gi].1.values[j];
            model.field.groups_mut()[gi].1.values[j] = orig + h;
            let lp = evaluate(&mut model, &mut mine, &fx, &lw, eval_seed, &mut ws)?;
            model.field.groups_mut()[gi].1.values[j] = orig - h;
            let lm = evaluate(&mut model, &mut mine, &fx, &lw, eval_seed, &mut ws)?;
            model.field.groups_mut()[gi].1.values[j] = orig;
            model.zero_grads();
            mine.critic.params.zero_grads();
            let fd = (lp - lm) / (2.0 * h);
            let an = buf.grads.data[j];
            rep.checked += 1;
            rep.max_rel_err = rep.max_rel_err.max(rel_err(an, fd, cfg.floor));
            rep.max_abs_grad = rep.max_abs_grad.max(an.abs());
        }
        reports.push(rep);
    }

    let mut rep = GroupReport {
        group: "critic".into(),
        checked: 0,
        max_rel_err: 0.0,
        max_abs_grad: 0.0,
    };
    for j in 0..critic_grads.len() {
        let orig = mine.critic.params.values[j];
        mine.critic.params.values[j] = orig + h;
        let lp = evaluate(&mut model, &mut mine, &fx, &lw, eval_seed, &mut ws)?;
        mine.critic.params.values[j] = orig - h;
        let lm = evaluate(&mut model, &mut mine, &fx, &lw, eval_seed, &mut ws)?;
        mine.critic.params.values[j] = orig;
        model.zero_grads();
        mine.critic.params.zero_grads();
        let fd = (lp - lm) / (2.0 * h);
        let an = critic_grads.grads.data[j];
        rep.checked += 1;
        rep.max_rel_err = rep.max_rel_err.max(rel_err(an, fd, cfg.floor));
        rep.max_abs_grad = rep.max_abs_grad.max(an.abs());
    }
    reports.push(rep);

    reports.extend(proposal_check(&model, &fx, cfg)?);
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups: reports,
        max_rel_err,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Checks the proposal gradient of `Σ (w_p − target)²` with the target
/// histogram frozen at its forward-pass value.
fn proposal_check(model: &Model<f64>, fx: &Fixture, cfg: &GradCheckConfig) -> Result<Vec<GroupReport>> {
    let lw = LossWeights {
        lambda_prop: 1.0,
        ..LossWeights::none()
    };
    let mut probe = model.clone();
    probe.zero_grads();
    // random perturbation so the proposal is not uniform
    {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 99);
        for (_, p) in probe.proposal.groups_mut() {
            for v in &mut p.values {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    let mut tapes: Vec<RayTape<f64>> = Vec::new();
    let mut hists = Vec::new();
    let mut g = probe.take_grads();
    for i in 0..fx.rays.len() {
        let mut tape = RayTape::default();
        probe.ray_forward(&fx.rays[i], fx.times[i], None, false, &mut tape)?;
        probe.ray_loss(&mut tape, fx.targets[i]);
        probe.ray_backward(&mut tape, fx.targets[i], &lw, 1.0, &mut g)?;
        hists.push(frozen_hist(&tape));
        tapes.push(tape);
    }
    probe.restore_grads(g);

    let objective = |m: &Model<f64>| -> f64 {
        let mut acc = 0.0;
        for (i, tape) in tapes.iter().enumerate() {
            if !tape.hit {
                continue;
            }
            let (a, b) = tape.range;
            let nb = m.proposal.config.bins;
            let edges = crate::render::uniform_edges(a, b, nb);
            let xs: Vec<[f64; 3]> = (0..nb)
                .map(|j| {
                    let q = m.bounds.normalize(fx.rays[i].at(0.5 * (edges[j] + edges[j + 1])));
                    [q[0].clamp(0.0, 1.0), q[1].clamp(0.0, 1.0), q[2].clamp(0.0, 1.0)]
                })
                .collect();
            let delta: Vec<f64> = edges.windows(2).map(|e| e[1] - e[0]).collect();
            let mut ev = ProposalEval::default();
            m.proposal.forward(&xs, fx.times[i], &mut ev);
            let mut w = Weights::default();
            composite_weights(&ev.sigma, &delta, &mut w);
            acc += w.w.iter().zip(&hists[i]).map(|(p, h)| (p - h).powi(2)).sum::<f64>();
        }
        acc
    };

    let h = cfg.step;
    let mut out = Vec::new();
    for gi in 0..2 {
        let grads = probe.proposal.groups()[gi].1.clone();
        let mut rep = GroupReport {
            group: crate::render::proposal::PROPOSAL_GROUPS[gi].to_string(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_grad: 0.0,
        };
        for j in probe_indices(&grads, cfg.untouched_probes, cfg.seed + 50 + gi as u64) {
            let mut p = probe.clone();
            p.proposal.groups_mut()[gi].1.values[j] += h;
            let mut m = probe.clone();
            m.proposal.groups_mut()[gi].1.values[j] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            let an = grads.grads.data[j];
            rep.checked += 1;
            rep.max_rel_err = rep.max_rel_err.max(rel_err(an, fd, cfg.floor));
            rep.max_abs_grad = rep.max_abs_grad.max(an.abs());
        }
        out.push(rep);
    }
    Ok(out)
}

fn frozen_hist(tape: &RayTape<f64>) -> Vec<f64> {
    tape.proposal_target().to_vec()
}

/// Small model used by the pipeline check: two levels per table and
/// narrow networks keep the finite-difference sweep fast.
pub fn check_model_config() -> ModelConfig {
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
            mode: EncodingMode::Masked,
        },
        proposal: ProposalConfig {
            bins: 8,
            res3: 5,
            res4: 4,
            time_res: 3,
        },
        n_samples: 4,
        bounds: Aabb::cube(1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_pipeline_passes() {
        let rep = full_pipeline_check(&check_model_config(), &GradCheckConfig::default()).unwrap();
        for g in &rep.groups {
            assert!(g.checked > 0, "{g:?}");
            assert!(g.max_rel_err < 1e-3, "{g:?}");
            assert!(g.max_abs_grad > 0.0, "{g:?}");
        }
    }
}
