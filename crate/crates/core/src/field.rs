//! The masked space-time field.
//!
//! A 3D hash grid and a 4D hash grid are blended per point by a learned mask
//! `m(x) = sigmoid(m̃(x))`:
//!
//! `enc(x,t) = m(x)·h3(x) + (1−m(x))·h4(x,t)`
//!
//! The blended feature is decoded by a density MLP (σ and a geometry
//! feature) and a color MLP (geometry feature plus SH view encoding). The
//! time-agnostic static branch feeds `h3(x)` alone through the same two MLPs,
//! and a voxel grid holds the per-point uncertainty
//! `u(x) = u_m + softplus(ũ(x))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Record};
use crate::error::{Error, Result};
use crate::grid::{DenseGrid, GridSample};
use crate::hashgrid::{EncodeCache, HashGridConfig, HashTable};
use crate::nn::mlp::{backward_into, forward_into};
use crate::nn::{GradBuffer, Mlp, MlpCache, MlpSpec, OutputActivation, ParamBuffer};
use crate::real::Real;
use crate::sh::{sh_dim, sh_encode};

/// Ceiling on the density pre-activation; `exp(15) ≈ 3.3e6`.
pub const DENSITY_CLAMP: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    /// `m·h3 + (1−m)·h4`.
    Masked,
    /// `h3 + h4`, no mask.
    Additive,
    /// `h4` alone; no 3D table, mask or static branch.
    Pure4d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub grid3: HashGridConfig,
    pub grid4: HashGridConfig,
    pub mask_resolution: u32,
    pub uncertainty_resolution: u32,
    pub u_m: f64,
    pub density_hidden: usize,
    pub density_hidden_layers: usize,
    pub geo_feat_dim: usize,
    pub color_hidden: usize,
    pub color_hidden_layers: usize,
    pub sh_degree: usize,
    pub mode: EncodingMode,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            grid3: HashGridConfig::new_3d(16, 2, 19, 16, 512),
            grid4: HashGridConfig::new_4d(16, 2, 19, (16, 512), (2, 32)),
            mask_resolution: 128,
            uncertainty_resolution: 64,
            u_m: 0.03,
            density_hidden: 64,
            density_hidden_layers: 1,
            geo_feat_dim: 15,
            color_hidden: 64,
            color_hidden_layers: 2,
            sh_degree: 4,
            mode: EncodingMode::Masked,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid3.validate()?;
        self.grid4.validate()?;
        if self.grid3.dims != 3 || self.grid4.dims != 4 {
            return Err(Error::Config("grid3 must be 3D and grid4 must be 4D".into()));
        }
        if self.mode != EncodingMode::Pure4d && self.grid3.output_dim() != self.grid4.output_dim() {
            return Err(Error::Config(format!(
                "blending needs equal encoder widths: 3D gives {}, 4D gives {}",
                self.grid3.output_dim(),
                self.grid4.output_dim()
            )));
        }
        if self.mask_resolution < 2 || self.uncertainty_resolution < 2 {
            return Err(Error::Config("mask/uncertainty resolution must be >= 2".into()));
        }
        if !(1..=4).contains(&self.sh_degree) {
            return Err(Error::Config("sh_degree must be in 1..=4".into()));
        }
        if self.u_m < 0.0 {
            return Err(Error::Config("u_m must be non-negative".into()));
        }
        Ok(())
    }

    pub fn encoding_dim(&self) -> usize {
        self.grid4.output_dim()
    }

    pub fn density_spec(&self) -> MlpSpec {
        MlpSpec::new(
            self.encoding_dim(),
            self.density_hidden,
            self.density_hidden_layers,
            1 + self.geo_feat_dim,
        )
    }

    pub fn color_spec(&self) -> MlpSpec {
        MlpSpec::new(
            self.geo_feat_dim + sh_dim(self.sh_degree),
            self.color_hidden,
            self.color_hidden_layers,
            3,
        )
        .with_output(OutputActivation::Sigmoid)
    }

    pub fn has_static_branch(&self) -> bool {
        self.mode != EncodingMode::Pure4d
    }

    pub fn has_mask(&self) -> bool {
        self.mode == EncodingMode::Masked
    }
}

/// Raw mask logits on a dense voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid<R> {
    pub grid: DenseGrid<R>,
}

impl<R: Real> MaskGrid<R> {
    /// Interpolate-then-activate: `sigmoid(trilerp(m̃, x))`.
    pub fn value(&self, x: [R; 3]) -> (R, GridSample<R>) {
        let s = self.grid.sample(&x);
        (s.value.sigmoid(), s)
    }
}

/// Raw uncertainty values and the soft-plus shift.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyGrid<R> {
    pub grid: DenseGrid<R>,
    pub u_m: R,
}

impl<R: Real> UncertaintyGrid<R> {
    pub fn value(&self, x: [R; 3]) -> (R, GridSample<R>) {
        let s = self.grid.sample(&x);
        (self.u_m + s.value.softplus(), s)
    }
}

#[derive(Debug, Clone)]
pub struct SpaceTimeField<R> {
    pub config: FieldConfig,
    pub table3d: HashTable<R>,
    pub table4d: HashTable<R>,
    pub mask: MaskGrid<R>,
    pub uncertainty: UncertaintyGrid<R>,
    pub density_mlp: Mlp<R>,
    pub color_mlp: Mlp<R>,
}

/// Names of the parameter groups, in a fixed order.
pub const FIELD_GROUPS: [&str; 6] = ["table3d", "table4d", "mask", "uncertainty", "density_mlp", "color_mlp"];

#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrads<R> {
    pub table3d: GradBuffer<R>,
    pub table4d: GradBuffer<R>,
    pub mask: GradBuffer<R>,
    pub uncertainty: GradBuffer<R>,
    pub density: GradBuffer<R>,
    pub color: GradBuffer<R>,
}

impl<R: Real> FieldGrads<R> {
    pub fn accumulate(&mut self, other: &FieldGrads<R>) {
        self.table3d.accumulate(&other.table3d);
        self.table4d.accumulate(&other.table4d);
        self.mask.accumulate(&other.mask);
        self.uncertainty.accumulate(&other.uncertainty);
        self.density.accumulate(&other.density);
        self.color.accumulate(&other.color);
    }

    pub fn zero(&mut self) {
        for g in self.buffers_mut() {
            g.zero();
        }
    }

    pub fn buffers(&self) -> [&GradBuffer<R>; 6] {
        [&self.table3d, &self.table4d, &self.mask, &self.uncertainty, &self.density, &self.color]
    }

    pub fn buffers_mut(&mut self) -> [&mut GradBuffer<R>; 6] {
        [
            &mut self.table3d,
            &mut self.table4d,
            &mut self.mask,
            &mut self.uncertainty,
            &mut self.density,
            &mut self.color,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub dynamic: bool,
    pub static_branch: bool,
    pub uncertainty: bool,
}

impl EvalOptions {
    pub const DYNAMIC: EvalOptions = EvalOptions {
        dynamic: true,
        static_branch: false,
        uncertainty: false,
    };
    pub const STATIC: EvalOptions = EvalOptions {
        dynamic: false,
        static_branch: true,
        uncertainty: false,
    };
    pub const ALL: EvalOptions = EvalOptions {
        dynamic: true,
        static_branch: true,
        uncertainty: true,
    };
}

/// Per-sample intermediates of a batched field evaluation.
#[derive(Debug, Clone, Default)]
pub struct FieldEval<R> {
    pub n: usize,
    opts: Option<EvalOptions>,
    pub h3: Vec<R>,
    pub h4: Vec<R>,
    c3: EncodeCache<R>,
    c4: EncodeCache<R>,
    mask_s: Vec<GridSample<R>>,
    pub m: Vec<R>,
    unc_s: Vec<GridSample<R>>,
    pub u: Vec<R>,
    pub enc: Vec<R>,
    sh: Vec<R>,
    dens: MlpCache<R>,
    col_in: Vec<R>,
    col: MlpCache<R>,
    pub sigma: Vec<R>,
    pub rgb: Vec<R>,
    s_dens: MlpCache<R>,
    s_col_in: Vec<R>,
    s_col: MlpCache<R>,
    pub sigma_s: Vec<R>,
    pub rgb_s: Vec<R>,
    // backward scratch
    d_tmp: Vec<R>,
    d_col_in: Vec<R>,
    d_enc: Vec<R>,
    d_h3: Vec<R>,
    d_h4: Vec<R>,
}

/// Upstream gradients for [`SpaceTimeField::backward`]. Absent slices are
/// treated as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct FieldUpstream<'a, R> {
    pub d_sigma: Option<&'a [R]>,
    pub d_rgb: Option<&'a [R]>,
    pub d_sigma_s: Option<&'a [R]>,
    pub d_rgb_s: Option<&'a [R]>,
    /// Extra `∂L/∂m` per sample (sparsity and mutual-information terms).
    pub d_m: Option<&'a [R]>,
    pub d_u: Option<&'a [R]>,
}

impl<R: Real> SpaceTimeField<R> {
    pub fn new<G: Rng + ?Sized>(config: FieldConfig, rng: &mut G) -> Result<Self> {
        config.validate()?;
        let table3d = HashTable::new(config.grid3, rng)?;
        let table4d = HashTable::new(config.grid4, rng)?;
        let density_mlp = Mlp::new(config.density_spec(), rng)?;
        let color_mlp = Mlp::new(config.color_spec(), rng)?;
        Ok(SpaceTimeField {
            mask: MaskGrid {
                grid: DenseGrid::new_3d(config.mask_resolution, R::zero()),
            },
            uncertainty: UncertaintyGrid {
                grid: DenseGrid::new_3d(config.uncertainty_resolution, R::zero()),
                u_m: R::c(config.u_m),
            },
            table3d,
            table4d,
            density_mlp,
            color_mlp,
            config,
        })
    }

    /// Every parameter zero; tables included.
    pub fn zeros(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        Ok(SpaceTimeField {
            table3d: HashTable::zeros(config.grid3)?,
            table4d: HashTable::zeros(config.grid4)?,
            mask: MaskGrid {
                grid: DenseGrid::new_3d(config.mask_resolution, R::zero()),
            },
            uncertainty: UncertaintyGrid {
                grid: DenseGrid::new_3d(config.uncertainty_resolution, R::zero()),
                u_m: R::c(config.u_m),
            },
            density_mlp: Mlp::zeros(config.density_spec())?,
            color_mlp: Mlp::zeros(config.color_spec())?,
            config,
        })
    }

    pub fn groups(&self) -> [(&'static str, &ParamBuffer<R>); 6] {
        [
            (FIELD_GROUPS[0], &self.table3d.params),
            (FIELD_GROUPS[1], &self.table4d.params),
            (FIELD_GROUPS[2], &self.mask.grid.params),
            (FIELD_GROUPS[3], &self.uncertainty.grid.params),
            (FIELD_GROUPS[4], &self.density_mlp.params),
            (FIELD_GROUPS[5], &self.color_mlp.params),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut ParamBuffer<R>); 6] {
        [
            (FIELD_GROUPS[0], &mut self.table3d.params),
            (FIELD_GROUPS[1], &mut self.table4d.params),
            (FIELD_GROUPS[2], &mut self.mask.grid.params),
            (FIELD_GROUPS[3], &mut self.uncertainty.grid.params),
            (FIELD_GROUPS[4], &mut self.density_mlp.params),
            (FIELD_GROUPS[5], &mut self.color_mlp.params),
        ]
    }

    pub fn take_grads(&mut self) -> FieldGrads<R> {
        FieldGrads {
            table3d: self.table3d.params.take_grads(),
            table4d: self.table4d.params.take_grads(),
            mask: self.mask.grid.params.take_grads(),
            uncertainty: self.uncertainty.grid.params.take_grads(),
            density: self.density_mlp.params.take_grads(),
            color: self.color_mlp.params.take_grads(),
        }
    }

    pub fn restore_grads(&mut self, g: FieldGrads<R>) {
        self.table3d.params.restore_grads(g.table3d);
        self.table4d.params.restore_grads(g.table4d);
        self.mask.grid.params.restore_grads(g.mask);
        self.uncertainty.grid.params.restore_grads(g.uncertainty);
        self.density_mlp.params.restore_grads(g.density);
        self.color_mlp.params.restore_grads(g.color);
    }

    /// Fresh zero gradients shaped like this field's.
    pub fn zero_grads_like(&self) -> FieldGrads<R> {
        let g = |p: &ParamBuffer<R>| GradBuffer::new(p.len(), p.grads.is_sparse());
        FieldGrads {
            table3d: g(&self.table3d.params),
            table4d: g(&self.table4d.params),
            mask: g(&self.mask.grid.params),
            uncertainty: g(&self.uncertainty.grid.params),
            density: g(&self.density_mlp.params),
            color: g(&self.color_mlp.params),
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.groups_mut() {
            p.zero_grads();
        }
    }

    pub fn mask_value(&self, x: [R; 3]) -> R {
        self.mask.value(x).0
    }

    pub fn uncertainty_value(&self, x: [R; 3]) -> R {
        self.uncertainty.value(x).0
    }

    /// The blended encoding of one point.
    pub fn blended_encoding(&self, x: [R; 3], t: R) -> Vec<R> {
        let mut ev = FieldEval::default();
        self.encode_batch(&[x], t, true, false, &mut ev);
        ev.enc
    }

    /// `(σ, rgb, g)` of the dynamic branch at one point.
    pub fn query_dynamic(&self, x: [R; 3], d: [R; 3], t: R) -> Result<(R, [R; 3], Vec<R>)> {
        check_unit(d)?;
        let mut ev = FieldEval::default();
        self.forward(&[x], d, t, EvalOptions::DYNAMIC, &mut ev)?;
        let g = ev.dens.raw_output()[1..].to_vec();
        Ok((ev.sigma[0], [ev.rgb[0], ev.rgb[1], ev.rgb[2]], g))
    }

    /// `(σ_s, rgb_s)` of the time-agnostic static branch at one point.
    pub fn query_static(&self, x: [R; 3], d: [R; 3]) -> Result<(R, [R; 3])> {
        check_unit(d)?;
        let mut ev = FieldEval::default();
        self.forward(&[x], d, R::zero(), EvalOptions::STATIC, &mut ev)?;
        Ok((ev.sigma_s[0], [ev.rgb_s[0], ev.rgb_s[1], ev.rgb_s[2]]))
    }

    fn encode_batch(&self, xs: &[[R; 3]], t: R, dynamic: bool, need_h3: bool, ev: &mut FieldEval<R>) {
        let n = xs.len();
        ev.n = n;
        ev.h3.clear();
        ev.h4.clear();
        ev.c3.clear();
        ev.c4.clear();
        ev.mask_s.clear();
        ev.m.clear();
        ev.enc.clear();
        let mode = self.config.mode;
        if mode != EncodingMode::Pure4d && (dynamic || need_h3) {
            for &x in xs {
                self.table3d.encode_push(x, None, &mut ev.h3, &mut ev.c3);
            }
        }
        if !dynamic {
            return;
        }
        for &x in xs {
            self.table4d.encode_push(x, Some(t), &mut ev.h4, &mut ev.c4);
        }
        let e = self.config.encoding_dim();
        match mode {
            EncodingMode::Masked => {
                for (i, &x) in xs.iter().enumerate() {
                    let (m, s) = self.mask.value(x);
                    ev.m.push(m);
                    ev.mask_s.push(s);
                    let one_m = R::one() - m;
                    for k in 0..e {
                        ev.enc.push(m * ev.h3[i * e + k] + one_m * ev.h4[i * e + k]);
                    }
                }
            }
            EncodingMode::Additive => {
                ev.enc.extend(ev.h3.iter().zip(&ev.h4).map(|(&a, &b)| a + b));
            }
            EncodingMode::Pure4d => ev.enc.extend_from_slice(&ev.h4),
        }
    }

    /// Batched evaluation of samples along one ray: positions are normalized
    /// to `[0,1]^3`, `dir` is the unit ray direction, `t` normalized time.
    pub fn forward(&self, xs: &[[R; 3]], dir: [R; 3], t: R, opts: EvalOptions, ev: &mut FieldEval<R>) -> Result<()> {
        if opts.static_branch && !self.config.has_static_branch() {
            return Err(Error::Config("pure-4D field has no static branch".into()));
        }
        let n = xs.len();
        self.encode_batch(xs, t, opts.dynamic, opts.static_branch, ev);
        ev.opts = Some(opts);
        ev.sh.clear();
        sh_encode(dir, self.config.sh_degree, &mut ev.sh);
        let geo = self.config.geo_feat_dim;
        let dspec = self.density_mlp.spec;
        let cspec = self.color_mlp.spec;
        let clamp = R::c(DENSITY_CLAMP);

        let decode = |input: &[R],
                      dens: &mut MlpCache<R>,
                      col_in: &mut Vec<R>,
                      col: &mut MlpCache<R>,
                      sigma: &mut Vec<R>,
                      rgb: &mut Vec<R>,
                      sh: &[R]|
         -> Result<()> {
            forward_into(&dspec, &self.density_mlp.params.values, input, n, dens)?;
            let raw = dens.raw_output();
            sigma.clear();
            col_in.clear();
            for i in 0..n {
                let row = &raw[i * (1 + geo)..(i + 1) * (1 + geo)];
                sigma.push(row[0].min(clamp).exp());
                col_in.extend_from_slice(&row[1..]);
                col_in.extend_from_slice(sh);
            }
            forward_into(&cspec, &self.color_mlp.params.values, col_in, n, col)?;
            rgb.clear();
            rgb.extend_from_slice(col.output());
            Ok(())
        };

        if opts.dynamic {
            decode(&ev.enc, &mut ev.dens, &mut ev.col_in, &mut ev.col, &mut ev.sigma, &mut ev.rgb, &ev.sh)?;
            check_finite("dynamic branch", xs, t, &ev.sigma, &ev.rgb)?;
        } else {
            ev.sigma.clear();
            ev.rgb.clear();
        }
        if opts.static_branch {
            decode(&ev.h3, &mut ev.s_dens, &mut ev.s_col_in, &mut ev.s_col, &mut ev.sigma_s, &mut ev.rgb_s, &ev.sh)?;
            check_finite("static branch", xs, t, &ev.sigma_s, &ev.rgb_s)?;
        } else {
            ev.sigma_s.clear();
            ev.rgb_s.clear();
        }
        ev.unc_s.clear();
        ev.u.clear();
        if opts.uncertainty {
            for &x in xs {
                let (u, s) = self.uncertainty.value(x);
                ev.u.push(u);
                ev.unc_s.push(s);
            }
        }
        Ok(())
    }

    /// Reverse pass of [`Self::forward`], accumulating into `g`.
    pub fn backward(&self, ev: &mut FieldEval<R>, up: &FieldUpstream<'_, R>, g: &mut FieldGrads<R>) -> Result<()> {
        let opts = ev
            .opts
            .ok_or_else(|| Error::Config("field backward without a forward pass".into()))?;
        let n = ev.n;
        let e = self.config.encoding_dim();
        let geo = self.config.geo_feat_dim;
        let sh_n = ev.sh.len();
        let dspec = self.density_mlp.spec;
        let cspec = self.color_mlp.spec;
        let clamp = R::c(DENSITY_CLAMP);
        let mode = self.config.mode;

        let mut d_tmp = std::mem::take(&mut ev.d_tmp);
        let mut d_col_in = std::mem::take(&mut ev.d_col_in);
        let mut d_enc = std::mem::take(&mut ev.d_enc);
        let mut d_h3 = std::mem::take(&mut ev.d_h3);
        let mut d_h4 = std::mem::take(&mut ev.d_h4);
        d_h3.clear();
        d_h3.resize(if mode == EncodingMode::Pure4d { 0 } else { n * e }, R::zero());
        d_h4.clear();
        d_h4.resize(n * e, R::zero());

        // Decoder reverse pass shared by both branches; leaves ∂/∂input in d_enc.
        let mut decode_back = |d_sigma: Option<&[R]>,
                               d_rgb: Option<&[R]>,
                               sigma: &[R],
                               dens: &mut MlpCache<R>,
                               col: &mut MlpCache<R>,
                               d_enc: &mut Vec<R>,
                               g: &mut FieldGrads<R>|
         -> Result<bool> {
            if d_sigma.is_none() && d_rgb.is_none() {
                return Ok(false);
            }
            let zeros_rgb;
            let d_rgb = match d_rgb {
                Some(d) => d,
                None => {
                    zeros_rgb = vec![R::zero(); n * 3];
                    &zeros_rgb
                }
            };
            backward_into(&cspec, &self.color_mlp.params.values, col, d_rgb, &mut g.color, &mut d_col_in)?;
            d_tmp.clear();
            let raw = dens.raw_output();
            for i in 0..n {
                let ds = match d_sigma {
                    Some(d) if raw[i * (1 + geo)] <= clamp => d[i] * sigma[i],
                    _ => R::zero(),
                };
                d_tmp.push(ds);
                d_tmp.extend_from_slice(&d_col_in[i * (geo + sh_n)..i * (geo + sh_n) + geo]);
            }
            backward_into(&dspec, &self.density_mlp.params.values, dens, &d_tmp, &mut g.density, d_enc)?;
            Ok(true)
        };

        if opts.dynamic {
            let any = decode_back(up.d_sigma, up.d_rgb, &ev.sigma, &mut ev.dens, &mut ev.col, &mut d_enc, g)?;
            if !any {
                d_enc.clear();
                d_enc.resize(n * e, R::zero());
            }
            match mode {
                EncodingMode::Masked => {
                    for i in 0..n {
                        let m = ev.m[i];
                        let one_m = R::one() - m;
                        let mut dm = up.d_m.map_or(R::zero(), |d| d[i]);
                        for k in 0..e {
                            let de = d_enc[i * e + k];
                            d_h3[i * e + k] += m * de;
                            d_h4[i * e + k] = one_m * de;
                            dm += (ev.h3[i * e + k] - ev.h4[i * e + k]) * de;
                        }
                        ev.mask_s[i].backward(dm * m * one_m, &mut g.mask);
                    }
                }
                EncodingMode::Additive => {
                    for (k, &de) in d_enc.iter().enumerate() {
                        d_h3[k] += de;
                        d_h4[k] = de;
                    }
                }
                EncodingMode::Pure4d => d_h4.copy_from_slice(&d_enc),
            }
        }
        if opts.static_branch
            && decode_back(up.d_sigma_s, up.d_rgb_s, &ev.sigma_s, &mut ev.s_dens, &mut ev.s_col, &mut d_enc, g)?
        {
            for (a, &b) in d_h3.iter_mut().zip(d_enc.iter()) {
                *a += b;
            }
        }
        if opts.uncertainty {
            if let Some(du) = up.d_u {
                for (s, &d) in ev.unc_s.iter().zip(du) {
                    s.backward(d * s.value.sigmoid(), &mut g.uncertainty);
                }
            }
        }
        if !ev.c3.is_empty() {
            for i in 0..n {
                self.table3d.backward_point(&ev.c3, i, &d_h3[i * e..(i + 1) * e], &mut g.table3d);
            }
        }
        if opts.dynamic {
            for i in 0..n {
                self.table4d.backward_point(&ev.c4, i, &d_h4[i * e..(i + 1) * e], &mut g.table4d);
            }
        }

        ev.d_tmp = d_tmp;
        ev.d_col_in = d_col_in;
        ev.d_enc = d_enc;
        ev.d_h3 = d_h3;
        ev.d_h4 = d_h4;
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> SpaceTimeField<S> {
        SpaceTimeField {
            config: self.config.clone(),
            table3d: self.table3d.cast(),
            table4d: self.table4d.cast(),
            mask: MaskGrid {
                grid: self.mask.grid.cast(),
            },
            uncertainty: UncertaintyGrid {
                grid: self.uncertainty.grid.cast(),
                u_m: S::c(self.uncertainty.u_m.f64()),
            },
            density_mlp: self.density_mlp.cast(),
            color_mlp: self.color_mlp.cast(),
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
        let config: FieldConfig = serde_json::from_slice(&c.get(&format!("{prefix}.config"))?.payload)?;
        let mut field = Self::zeros(config)?;
        for (name, p) in field.groups_mut() {
            let sparse = p.grads.is_sparse();
            let loaded = ParamBuffer::load_from(c, &format!("{prefix}.{name}"), sparse)?;
            if loaded.len() != p.len() {
                return Err(Error::Format(format!(
                    "`{prefix}.{name}` has {} values, config implies {}",
                    loaded.len(),
                    p.len()
                )));
            }
            *p = loaded;
        }
        Ok(field)
    }
}

fn check_unit<R: Real>(d: [R; 3]) -> Result<()> {
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().f64();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("direction must be unit length, |d| = {norm}")));
    }
    Ok(())
}

fn check_finite<R: Real>(what: &str, xs: &[[R; 3]], t: R, sigma: &[R], rgb: &[R]) -> Result<()> {
    for (i, x) in xs.iter().enumerate() {
        if !sigma[i].is_finite() || rgb[i * 3..i * 3 + 3].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: what.into(),
                detail: format!(
                    "x = ({}, {}, {}), t = {}",
                    x[0].f64(),
                    x[1].f64(),
                    x[2].f64(),
                    t.f64()
                ),
            });
        }
    }
    Ok(())
}
