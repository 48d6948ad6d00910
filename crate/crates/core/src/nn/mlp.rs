//! Fully connected networks with ReLU hidden units.
//!
//! Parameters live in one flat buffer, layer by layer: a row-major
//! `(out, in)` weight block followed by the `out` biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::{GradBuffer, ParamBuffer};
use crate::error::{check_dim, Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    None,
    Sigmoid,
    Exp,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dim: usize, hidden_layers: usize, output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_dim,
            hidden_layers,
            output_dim,
            activation: Activation::Relu,
            output_activation: OutputActivation::None,
        }
    }

    pub fn with_output(mut self, act: OutputActivation) -> Self {
        self.output_activation = act;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config(format!("MLP dims must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// `(in, out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut prev = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((prev, self.hidden_dim));
            prev = self.hidden_dim;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Kaiming-uniform weights, zero biases.
    pub fn init_params<R: Real, G: Rng + ?Sized>(&self, rng: &mut G) -> Vec<R> {
        let mut out = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layer_dims() {
            let limit = (6.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                out.push(R::c(rng.random_range(-limit..limit)));
            }
            out.extend(std::iter::repeat_n(R::zero(), fan_out));
        }
        out
    }
}

/// Activation record of one forward call.
#[derive(Debug, Clone, Default)]
pub struct MlpCache<R> {
    spec: Option<MlpSpec>,
    rows: usize,
    /// `acts[k]` is the input of layer `k`; the last entry is the raw output.
    acts: Vec<Vec<R>>,
    output: Vec<R>,
    scratch_d: Vec<R>,
    scratch_dp: Vec<R>,
}

impl<R: Real> MlpCache<R> {
    pub fn output(&self) -> &[R] {
        &self.output
    }

    pub fn raw_output(&self) -> &[R] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Forward pass writing into a reusable cache.
pub fn forward_into<R: Real>(
    spec: &MlpSpec,
    params: &[R],
    input: &[R],
    rows: usize,
    cache: &mut MlpCache<R>,
) -> Result<()> {
    check_dim("mlp params", spec.param_count(), params.len())?;
    check_dim("mlp input", rows * spec.input_dim, input.len())?;
    let dims = spec.layer_dims();
    cache.acts.resize_with(dims.len() + 1, Vec::new);
    cache.acts[0].clear();
    cache.acts[0].extend_from_slice(input);

    let mut offset = 0;
    for (k, &(n_in, n_out)) in dims.iter().enumerate() {
        let (w, rest) = params[offset..].split_at(n_in * n_out);
        let b = &rest[..n_out];
        offset += n_in * n_out + n_out;
        let (head, tail) = cache.acts.split_at_mut(k + 1);
        let x = &head[k];
        let y = &mut tail[0];
        y.clear();
        y.resize(rows * n_out, R::zero());
        let hidden = k + 1 < dims.len();
        for r in 0..rows {
            let xr = &x[r * n_in..(r + 1) * n_in];
            let yr = &mut y[r * n_out..(r + 1) * n_out];
            for o in 0..n_out {
                let wr = &w[o * n_in..(o + 1) * n_in];
                let mut acc = b[o];
                for i in 0..n_in {
                    acc += wr[i] * xr[i];
                }
                yr[o] = if hidden && acc < R::zero() { R::zero() } else { acc };
            }
        }
    }

    let raw = &cache.acts[dims.len()];
    cache.output.clear();
    cache.output.extend(raw.iter().map(|&z| match spec.output_activation {
        OutputActivation::None => z,
        OutputActivation::Sigmoid => z.sigmoid(),
        OutputActivation::Exp => z.exp(),
        OutputActivation::Softplus => z.softplus(),
    }));
    cache.spec = Some(*spec);
    cache.rows = rows;
    Ok(())
}

/// Backward pass: accumulates parameter gradients into `grads` and writes the
/// input gradient into `d_input`.
pub fn backward_into<R: Real>(
    spec: &MlpSpec,
    params: &[R],
    cache: &mut MlpCache<R>,
    d_output: &[R],
    grads: &mut GradBuffer<R>,
    d_input: &mut Vec<R>,
) -> Result<()> {
    if cache.spec != Some(*spec) {
        return Err(Error::Config("stale MLP cache: spec differs from forward call".into()));
    }
    let rows = cache.rows;
    check_dim("mlp d_output", rows * spec.output_dim, d_output.len())?;
    check_dim("mlp grads", spec.param_count(), grads.len())?;
    let dims = spec.layer_dims();

    let mut d = std::mem::take(&mut cache.scratch_d);
    d.clear();
    let raw = &cache.acts[dims.len()];
    for ((&g, &z), &y) in d_output.iter().zip(raw).zip(&cache.output) {
        d.push(match spec.output_activation {
            OutputActivation::None => g,
            OutputActivation::Sigmoid => g * y * (R::one() - y),
            OutputActivation::Exp => g * y,
            OutputActivation::Softplus => g * z.sigmoid(),
        });
    }

    let mut offsets = Vec::with_capacity(dims.len());
    let mut off = 0;
    for &(i, o) in &dims {
        offsets.push(off);
        off += i * o + o;
    }

    let mut dp = std::mem::take(&mut cache.scratch_dp);
    for k in (0..dims.len()).rev() {
        let (n_in, n_out) = dims[k];
        let w = &params[offsets[k]..offsets[k] + n_in * n_out];
        let x = &cache.acts[k];
        dp.clear();
        dp.resize(n_in * n_out + n_out, R::zero());
        let mut d_prev = vec![R::zero(); rows * n_in];
        for r in 0..rows {
            let xr = &x[r * n_in..(r + 1) * n_in];
            let dr = &d[r * n_out..(r + 1) * n_out];
            let dpr = &mut d_prev[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let g = dr[o];
                if g == R::zero() {
                    continue;
                }
                let wr = &w[o * n_in..(o + 1) * n_in];
                let dw = &mut dp[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    dw[i] += g * xr[i];
                    dpr[i] += g * wr[i];
                }
                dp[n_in * n_out + o] += g;
            }
        }
        grads.add_slice(offsets[k], &dp);
        if k > 0 {
            // ReLU: the layer input is the previous activation, zero iff inactive.
            for (dv, &xv) in d_prev.iter_mut().zip(x.iter()) {
                if xv <= R::zero() {
                    *dv = R::zero();
                }
            }
        }
        d = d_prev;
    }
    d_input.clear();
    d_input.extend_from_slice(&d);
    cache.scratch_d = d;
    cache.scratch_dp = dp;
    Ok(())
}

/// Batched forward over `input` (row-major, `rows × input_dim`).
pub fn mlp_forward<R: Real>(
    spec: &MlpSpec,
    params: &ParamBuffer<R>,
    input: &[R],
) -> Result<(Vec<R>, MlpCache<R>)> {
    spec.validate()?;
    if input.len() % spec.input_dim != 0 {
        return Err(Error::Dimension {
            context: "mlp input width",
            expected: spec.input_dim,
            actual: input.len() % spec.input_dim,
        });
    }
    let rows = input.len() / spec.input_dim;
    let mut cache = MlpCache::default();
    forward_into(spec, &params.values, input, rows, &mut cache)?;
    Ok((cache.output.clone(), cache))
}

/// Batched backward; gradients accumulate into `params.grads`.
pub fn mlp_backward<R: Real>(
    spec: &MlpSpec,
    params: &mut ParamBuffer<R>,
    cache: &mut MlpCache<R>,
    d_output: &[R],
) -> Result<Vec<R>> {
    let mut d_input = Vec::new();
    let ParamBuffer { values, grads, .. } = params;
    backward_into(spec, values, cache, d_output, grads, &mut d_input)?;
    Ok(d_input)
}

/// An MLP together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<R> {
    pub spec: MlpSpec,
    pub params: ParamBuffer<R>,
}

impl<R: Real> Mlp<R> {
    pub fn new<G: Rng + ?Sized>(spec: MlpSpec, rng: &mut G) -> Result<Self> {
        spec.validate()?;
        Ok(Mlp {
            spec,
            params: ParamBuffer::from_values(spec.init_params(rng), false),
        })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Mlp {
            spec,
            params: ParamBuffer::zeros(spec.param_count(), false),
        })
    }

    pub fn forward(&self, input: &[R], rows: usize, cache: &mut MlpCache<R>) -> Result<()> {
        forward_into(&self.spec, &self.params.values, input, rows, cache)
    }

    pub fn cast<S: Real>(&self) -> Mlp<S> {
        Mlp {
            spec: self.spec,
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_matrix_product() {
        let spec = MlpSpec::new(2, 1, 0, 2);
        let params = ParamBuffer::from_values(vec![1.0f32, 2.0, 3.0, 4.0, 0.0, 0.0], false);
        let (out, _) = mlp_forward(&spec, &params, &[1.0, 1.0]).unwrap();
        assert_eq!(out, vec![3.0, 7.0]);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = MlpSpec::new(5, 8, 2, 3);
        let params = ParamBuffer::<f32>::zeros(spec.param_count(), false);
        let (out, _) = mlp_forward(&spec, &params, &[0.3, -1.0, 2.0, 0.1, 5.0]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = MlpSpec::new(4, 16, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::<f32>::new(spec, &mut rng).unwrap();
        let x = [0.1f32, -0.4, 0.9, 0.25, 1.0, 2.0, -3.0, 0.5];
        let (a, _) = mlp_forward(&spec, &mlp.params, &x).unwrap();
        let (b, _) = mlp_forward(&spec, &mlp.params, &x).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn identity_layer_backward() {
        let spec = MlpSpec::new(2, 1, 0, 2);
        let mut params = ParamBuffer::from_values(vec![1.0f64, 0.0, 0.0, 1.0, 0.0, 0.0], false);
        let (_, mut cache) = mlp_forward(&spec, &params, &[0.3, 0.7]).unwrap();
        let d_in = mlp_backward(&spec, &mut params, &mut cache, &[1.0, 0.0]).unwrap();
        assert_eq!(d_in, vec![1.0, 0.0]);
        // dW row 0 = d_out[0] * x
        assert_eq!(&params.grads.data[..2], &[0.3, 0.7]);
    }

    #[test]
    fn relu_blocks_negative_preactivation() {
        // 1 -> 1 hidden -> 1, hidden pre-activation = -1 * x
        let spec = MlpSpec::new(1, 1, 1, 1);
        let mut params = ParamBuffer::from_values(vec![-1.0f64, 0.0, 1.0, 0.0], false);
        let (_, mut cache) = mlp_forward(&spec, &params, &[2.0]).unwrap();
        let d_in = mlp_backward(&spec, &mut params, &mut cache, &[1.0]).unwrap();
        assert_eq!(d_in, vec![0.0]);
        assert_eq!(params.grads.data[0], 0.0);
    }

    #[test]
    fn gradients_accumulate() {
        let spec = MlpSpec::new(2, 3, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::<f64>::new(spec, &mut rng).unwrap();
        let (_, mut c1) = mlp_forward(&spec, &mlp.params, &[0.5, 0.5]).unwrap();
        mlp_backward(&spec, &mut mlp.params, &mut c1, &[1.0]).unwrap();
        let once = mlp.params.grads.data.clone();
        let (_, mut c2) = mlp_forward(&spec, &mlp.params, &[0.5, 0.5]).unwrap();
        mlp_backward(&spec, &mut mlp.params, &mut c2, &[1.0]).unwrap();
        for (a, b) in once.iter().zip(&mlp.params.grads.data) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_errors_report_both_sides() {
        let spec = MlpSpec::new(3, 4, 1, 2);
        let params = ParamBuffer::<f32>::zeros(spec.param_count(), false);
        let err = mlp_forward(&spec, &params, &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        let short = ParamBuffer::<f32>::zeros(3, false);
        let err = mlp_forward(&spec, &short, &[1.0, 2.0, 3.0]).unwrap_err().to_string();
        assert!(err.contains(&spec.param_count().to_string()) && err.contains('3'));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let spec = MlpSpec::new(2, 4, 1, 1);
        let other = MlpSpec::new(2, 5, 1, 1);
        let params = ParamBuffer::<f32>::zeros(spec.param_count(), false);
        let (_, mut cache) = mlp_forward(&spec, &params, &[1.0, 2.0]).unwrap();
        let mut p2 = ParamBuffer::<f32>::zeros(other.param_count(), false);
        assert!(mlp_backward(&other, &mut p2, &mut cache, &[1.0]).is_err());
    }
}
