//! Density-only proposal field used to place the main quadrature samples.
//!
//! `σ_p(x, t) = exp(min(a(x) + b(x, t), 15))` with `a` a dense 3D grid and `b`
//! a coarser dense 4D grid.

use serde::{Deserialize, Serialize};

use crate::container::{Container, Record};
use crate::error::{Error, Result};
use crate::field::DENSITY_CLAMP;
use crate::grid::{DenseGrid, GridSample};
use crate::nn::{GradBuffer, ParamBuffer};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalConfig {
    /// Coarse bins per ray.
    pub bins: usize,
    pub res3: u32,
    pub res4: u32,
    pub time_res: u32,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            bins: 64,
            res3: 64,
            res4: 32,
            time_res: 16,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 || self.res3 < 2 || self.res4 < 2 || self.time_res < 2 {
            return Err(Error::Config(format!("proposal sizes must be >= 2: {self:?}")));
        }
        Ok(())
    }
}

pub const PROPOSAL_GROUPS: [&str; 2] = ["proposal3d", "proposal4d"];

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalField<R> {
    pub config: ProposalConfig,
    pub grid3: DenseGrid<R>,
    pub grid4: DenseGrid<R>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalGrads<R> {
    pub grid3: GradBuffer<R>,
    pub grid4: GradBuffer<R>,
}

impl<R: Real> ProposalGrads<R> {
    pub fn accumulate(&mut self, o: &ProposalGrads<R>) {
        self.grid3.accumulate(&o.grid3);
        self.grid4.accumulate(&o.grid4);
    }

    pub fn zero(&mut self) {
        self.grid3.zero();
        self.grid4.zero();
    }
}

#[derive(Debug, Clone, Default)]
pub struct ProposalEval<R> {
    s3: Vec<GridSample<R>>,
    s4: Vec<GridSample<R>>,
    raw: Vec<R>,
    pub sigma: Vec<R>,
}

impl<R: Real> ProposalField<R> {
    pub fn new(config: ProposalConfig) -> Result<Self> {
        config.validate()?;
        Ok(ProposalField {
            grid3: DenseGrid::new_3d(config.res3, R::zero()),
            grid4: DenseGrid::new_4d(config.res4, config.time_res, R::zero()),
            config,
        })
    }

    /// Densities at normalized positions `xs` and normalized time `t`.
    pub fn forward(&self, xs: &[[R; 3]], t: R, ev: &mut ProposalEval<R>) {
        ev.s3.clear();
        ev.s4.clear();
        ev.raw.clear();
        ev.sigma.clear();
        let clamp = R::c(DENSITY_CLAMP);
        for x in xs {
            let a = self.grid3.sample(x);
            let b = self.grid4.sample(&[x[0], x[1], x[2], t]);
            let raw = a.value + b.value;
            ev.raw.push(raw);
            ev.sigma.push(raw.min(clamp).exp());
            ev.s3.push(a);
            ev.s4.push(b);
        }
    }

    pub fn backward(&self, ev: &ProposalEval<R>, d_sigma: &[R], g: &mut ProposalGrads<R>) {
        let clamp = R::c(DENSITY_CLAMP);
        for i in 0..ev.sigma.len() {
            if ev.raw[i] > clamp {
                continue;
            }
            let d = d_sigma[i] * ev.sigma[i];
            ev.s3[i].backward(d, &mut g.grid3);
            ev.s4[i].backward(d, &mut g.grid4);
        }
    }

    pub fn groups(&self) -> [(&'static str, &ParamBuffer<R>); 2] {
        [(PROPOSAL_GROUPS[0], &self.grid3.params), (PROPOSAL_GROUPS[1], &self.grid4.params)]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut ParamBuffer<R>); 2] {
        [
            (PROPOSAL_GROUPS[0], &mut self.grid3.params),
            (PROPOSAL_GROUPS[1], &mut self.grid4.params),
        ]
    }

    pub fn take_grads(&mut self) -> ProposalGrads<R> {
        ProposalGrads {
            grid3: self.grid3.params.take_grads(),
            grid4: self.grid4.params.take_grads(),
        }
    }

    pub fn restore_grads(&mut self, g: ProposalGrads<R>) {
        self.grid3.params.restore_grads(g.grid3);
        self.grid4.params.restore_grads(g.grid4);
    }

    pub fn zero_grads_like(&self) -> ProposalGrads<R> {
        ProposalGrads {
            grid3: GradBuffer::new(self.grid3.len(), true),
            grid4: GradBuffer::new(self.grid4.len(), true),
        }
    }

    pub fn cast<S: Real>(&self) -> ProposalField<S> {
        ProposalField {
            config: self.config,
            grid3: self.grid3.cast(),
            grid4: self.grid4.cast(),
        }
    }

    pub fn save_into(&self, c: &mut Container, prefix: &str) -> Result<()> {
        c.insert(format!("{prefix}.config"), Record::from_bytes(&serde_json::to_vec(&self.config)?));
        for (name, p) in self.groups() {
            p.save_into(c, &format!("{prefix}.{name}"));
        }
        Ok(())
    }

    pub fn load_from(c: &Container, prefix: &str) -> Result<Self> {
        let config: ProposalConfig = serde_json::from_slice(&c.get(&format!("{prefix}.config"))?.payload)?;
        let mut p = Self::new(config)?;
        for (name, buf) in p.groups_mut() {
            let loaded = ParamBuffer::load_from(c, &format!("{prefix}.{name}"), true)?;
            if loaded.len() != buf.len() {
                return Err(Error::Format(format!("`{prefix}.{name}` does not match its config")));
            }
            *buf = loaded;
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ProposalField<f64> {
        let mut p = ProposalField::new(ProposalConfig {
            bins: 8,
            res3: 4,
            res4: 3,
            time_res: 3,
        })
        .unwrap();
        for (i, v) in p.grid3.params.values.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f64 * 0.1 - 0.5;
        }
        for (i, v) in p.grid4.params.values.iter_mut().enumerate() {
            *v = ((i * 13) % 7) as f64 * 0.1 - 0.3;
        }
        p
    }

    #[test]
    fn fresh_field_has_unit_density() {
        let p = ProposalField::<f32>::new(ProposalConfig::default()).unwrap();
        let mut ev = ProposalEval::default();
        p.forward(&[[0.3, 0.5, 0.7]], 0.2, &mut ev);
        assert_eq!(ev.sigma, vec![1.0]);
    }

    #[test]
    fn densities_are_positive_and_grads_match_fd() {
        let p = small();
        let xs = [[0.2, 0.7, 0.4], [0.9, 0.1, 0.55]];
        let t = 0.35;
        let mut ev = ProposalEval::default();
        p.forward(&xs, t, &mut ev);
        assert!(ev.sigma.iter().all(|&s| s > 0.0));
        let coef = [0.7, -1.3];
        let mut q = p.clone();
        let mut g = q.take_grads();
        p.backward(&ev, &coef, &mut g);
        q.restore_grads(g);
        let f = |p: &ProposalField<f64>| {
            let mut ev = ProposalEval::default();
            p.forward(&xs, t, &mut ev);
            coef[0] * ev.sigma[0] + coef[1] * ev.sigma[1]
        };
        let h = 1e-6;
        for gi in 0..2 {
            for j in 0..q.groups()[gi].1.len() {
                let mut a = p.clone();
                a.groups_mut()[gi].1.values[j] += h;
                let mut b = p.clone();
                b.groups_mut()[gi].1.values[j] -= h;
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                assert!((fd - q.groups()[gi].1.grads.data[j]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn roundtrip() {
        let p = small();
        let mut c = Container::new();
        p.save_into(&mut c, "prop").unwrap();
        assert_eq!(ProposalField::<f64>::load_from(&c, "prop").unwrap(), p);
    }
}
