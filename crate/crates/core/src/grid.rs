//! Dense scalar voxel grids with multilinear interpolation.

use crate::nn::{GradBuffer, ParamBuffer};
use crate::real::Real;

/// Interpolation record of one lookup: up to 16 corners (4D).
#[derive(Debug, Clone, Copy)]
pub struct GridSample<R> {
    pub value: R,
    pub idx: [u32; 16],
    pub w: [R; 16],
    pub n: u8,
}

impl<R: Real> GridSample<R> {
    /// Scatter `d_value` into the corner gradients.
    #[inline]
    pub fn backward(&self, d_value: R, grads: &mut GradBuffer<R>) {
        if d_value == R::zero() {
            return;
        }
        for c in 0..self.n as usize {
            if self.w[c] != R::zero() {
                grads.add(self.idx[c] as usize, self.w[c] * d_value);
            }
        }
    }
}

/// Scalar lattice with `res[d]` points per axis over `[0,1]^dims`, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid<R> {
    pub dims: usize,
    pub res: [u32; 4],
    pub params: ParamBuffer<R>,
}

impl<R: Real> DenseGrid<R> {
    pub fn new_3d(res: u32, init: R) -> Self {
        Self::new([res, res, res, 1], 3, init)
    }

    pub fn new_4d(res: u32, time_res: u32, init: R) -> Self {
        Self::new([res, res, res, time_res], 4, init)
    }

    fn new(res: [u32; 4], dims: usize, init: R) -> Self {
        let n: usize = res[..dims].iter().map(|&r| r as usize).product();
        DenseGrid {
            dims,
            res,
            params: ParamBuffer::from_values(vec![init; n], true),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Multilinear lookup; coordinates are clamped to `[0,1]`.
    #[inline]
    pub fn sample(&self, coords: &[R]) -> GridSample<R> {
        let dims = self.dims;
        let mut base = [0usize; 4];
        let mut frac = [R::zero(); 4];
        let mut stride = [0usize; 4];
        let mut s = 1usize;
        for d in 0..dims {
            stride[d] = s;
            s *= self.res[d] as usize;
            let n = self.res[d];
            if n < 2 {
                continue;
            }
            let c = coords[d].max(R::zero()).min(R::one());
            let pos = c * R::c((n - 1) as f64);
            let i0 = pos.floor().to_usize().unwrap_or(0).min(n as usize - 2);
            base[d] = i0;
            frac[d] = pos - R::c(i0 as f64);
        }
        let corners = 1usize << dims;
        let mut out = GridSample {
            value: R::zero(),
            idx: [0; 16],
            w: [R::zero(); 16],
            n: corners as u8,
        };
        let values = &self.params.values;
        for c in 0..corners {
            let mut w = R::one();
            let mut idx = 0usize;
            for d in 0..dims {
                let bit = (c >> d) & 1;
                let hi = bit == 1 && self.res[d] >= 2;
                idx += (base[d] + hi as usize) * stride[d];
                w *= if bit == 1 { frac[d] } else { R::one() - frac[d] };
            }
            out.idx[c] = idx as u32;
            out.w[c] = w;
            out.value += w * values[idx];
        }
        out
    }

    pub fn cast<S: Real>(&self) -> DenseGrid<S> {
        DenseGrid {
            dims: self.dims,
            res: self.res,
            params: self.params.cast(),
        }
    }

    /// World-normalized position of lattice point `i` (3D grids).
    pub fn lattice_point(&self, i: usize) -> [f64; 3] {
        let mut out = [0.0; 3];
        let mut rem = i;
        for (d, o) in out.iter_mut().enumerate() {
            let n = self.res[d] as usize;
            let k = rem % n;
            rem /= n;
            *o = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_along_one_axis() {
        let mut g = DenseGrid::<f64>::new_3d(2, 0.0);
        for i in 0..8 {
            if i & 1 == 1 {
                g.params.values[i] = 4.0;
            }
        }
        let s = g.sample(&[0.5, 0.2, 0.7]);
        assert!((s.value - 2.0).abs() < 1e-12);
        assert!((s.w[..8].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_scatters_weights() {
        let mut g = DenseGrid::<f64>::new_4d(3, 2, 0.0);
        let s = g.sample(&[0.25, 0.5, 0.75, 0.5]);
        let mut grads = g.params.take_grads();
        s.backward(2.0, &mut grads);
        let total: f64 = grads.data.iter().sum();
        assert!((total - 2.0).abs() < 1e-12);
        g.params.restore_grads(grads);
    }

    #[test]
    fn lattice_point_roundtrip() {
        let g = DenseGrid::<f32>::new_3d(5, 0.0);
        assert_eq!(g.lattice_point(0), [0.0, 0.0, 0.0]);
        assert_eq!(g.lattice_point(4 + 5 * 2), [1.0, 0.5, 0.0]);
    }
}
