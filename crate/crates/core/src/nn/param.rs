use crate::container::{Container, Record};
use crate::error::{Error, Result};
use crate::real::{cast_vec, Real};

/// Gradient accumulator.
///
/// In sparse mode every written index is remembered so that zeroing, worker
/// reduction and the optimizer only visit entries touched this step. Large
/// hash tables and voxel grids use sparse mode; MLP weights stay dense.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer<R> {
    pub data: Vec<R>,
    touched: Option<TouchSet>,
}

#[derive(Debug, Clone, PartialEq)]
struct TouchSet {
    bits: Vec<u64>,
    list: Vec<u32>,
}

impl<R: Real> GradBuffer<R> {
    pub fn new(len: usize, sparse: bool) -> Self {
        GradBuffer {
            data: vec![R::zero(); len],
            touched: sparse.then(|| TouchSet {
                bits: vec![0; len.div_ceil(64)],
                list: Vec::new(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_sparse(&self) -> bool {
        self.touched.is_some()
    }

    #[inline]
    pub fn add(&mut self, i: usize, g: R) {
        self.data[i] += g;
        if let Some(t) = &mut self.touched {
            let (w, b) = (i / 64, i % 64);
            if t.bits[w] & (1 << b) == 0 {
                t.bits[w] |= 1 << b;
                t.list.push(i as u32);
            }
        }
    }

    /// Dense accumulation of a contiguous block (used by MLP layers).
    #[inline]
    pub fn add_slice(&mut self, start: usize, g: &[R]) {
        if self.touched.is_some() {
            for (k, &v) in g.iter().enumerate() {
                self.add(start + k, v);
            }
        } else {
            for (d, &v) in self.data[start..start + g.len()].iter_mut().zip(g) {
                *d += v;
            }
        }
    }

    /// Indices written since the last zeroing, in first-write order; `None`
    /// for dense buffers.
    pub fn touched(&self) -> Option<&[u32]> {
        self.touched.as_ref().map(|t| t.list.as_slice())
    }

    pub fn zero(&mut self) {
        match &mut self.touched {
            Some(t) => {
                for &i in &t.list {
                    self.data[i as usize] = R::zero();
                    t.bits[i as usize / 64] = 0;
                }
                t.list.clear();
            }
            None => self.data.iter_mut().for_each(|g| *g = R::zero()),
        }
    }

    /// `self += other`, visiting only `other`'s touched entries when sparse.
    pub fn accumulate(&mut self, other: &GradBuffer<R>) {
        match other.touched() {
            Some(list) => {
                for &i in list {
                    self.add(i as usize, other.data[i as usize]);
                }
            }
            None => {
                for (i, &g) in other.data.iter().enumerate() {
                    self.add(i, g);
                }
            }
        }
    }

    pub fn max_abs(&self) -> R {
        self.data.iter().fold(R::zero(), |m, g| m.max(g.abs()))
    }
}

/// Trainable parameter vector with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBuffer<R> {
    pub values: Vec<R>,
    pub grads: GradBuffer<R>,
    pub adam_m: Vec<R>,
    pub adam_v: Vec<R>,
    pub step_count: u64,
}

impl<R: Real> ParamBuffer<R> {
    pub fn from_values(values: Vec<R>, sparse: bool) -> Self {
        let n = values.len();
        ParamBuffer {
            values,
            grads: GradBuffer::new(n, sparse),
            adam_m: vec![R::zero(); n],
            adam_v: vec![R::zero(); n],
            step_count: 0,
        }
    }

    pub fn zeros(len: usize, sparse: bool) -> Self {
        Self::from_values(vec![R::zero(); len], sparse)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.grads.zero();
    }

    /// Moves the gradient out so it can be written while `values` are read.
    pub fn take_grads(&mut self) -> GradBuffer<R> {
        let sparse = self.grads.is_sparse();
        std::mem::replace(&mut self.grads, GradBuffer::new(0, sparse))
    }

    pub fn restore_grads(&mut self, grads: GradBuffer<R>) {
        assert_eq!(grads.len(), self.values.len(), "gradient buffer length changed");
        self.grads = grads;
    }

    pub fn cast<S: Real>(&self) -> ParamBuffer<S> {
        ParamBuffer {
            values: cast_vec(&self.values),
            grads: GradBuffer {
                data: cast_vec(&self.grads.data),
                touched: self.grads.touched.clone(),
            },
            adam_m: cast_vec(&self.adam_m),
            adam_v: cast_vec(&self.adam_v),
            step_count: self.step_count,
        }
    }

    pub fn save_into(&self, c: &mut Container, name: &str) {
        c.insert(format!("{name}.values"), Record::from_reals(&self.values));
        c.insert(format!("{name}.adam_m"), Record::from_reals(&self.adam_m));
        c.insert(format!("{name}.adam_v"), Record::from_reals(&self.adam_v));
        c.insert(format!("{name}.step"), Record::from_u64s(&[self.step_count]));
    }

    pub fn load_from(c: &Container, name: &str, sparse: bool) -> Result<Self> {
        let values: Vec<R> = c.reals(&format!("{name}.values"))?;
        let adam_m: Vec<R> = c.reals(&format!("{name}.adam_m"))?;
        let adam_v: Vec<R> = c.reals(&format!("{name}.adam_v"))?;
        let step = c.get(&format!("{name}.step"))?.to_u64s()?;
        if adam_m.len() != values.len() || adam_v.len() != values.len() || step.len() != 1 {
            return Err(Error::Format(format!("inconsistent parameter buffer `{name}`")));
        }
        let n = values.len();
        Ok(ParamBuffer {
            values,
            grads: GradBuffer::new(n, sparse),
            adam_m,
            adam_v,
            step_count: step[0],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_zeroing_clears_everything_written() {
        let mut g = GradBuffer::<f32>::new(200, true);
        g.add(3, 1.0);
        g.add(150, -2.0);
        g.add(3, 0.5);
        assert_eq!(g.touched().unwrap(), &[3, 150]);
        assert_eq!(g.data[3], 1.5);
        g.zero();
        assert_eq!(g.max_abs(), 0.0);
        assert!(g.touched().unwrap().is_empty());
    }

    #[test]
    fn accumulate_matches_dense_sum() {
        let mut a = GradBuffer::<f64>::new(10, true);
        let mut b = GradBuffer::<f64>::new(10, true);
        a.add(1, 1.0);
        b.add(1, 2.0);
        b.add(7, 3.0);
        a.accumulate(&b);
        assert_eq!(a.data[1], 3.0);
        assert_eq!(a.data[7], 3.0);
        assert_eq!(a.touched().unwrap(), &[1, 7]);
    }

    #[test]
    fn zero_grads_postcondition() {
        let mut p = ParamBuffer::<f32>::zeros(16, false);
        p.grads.add_slice(4, &[1.0, -1.0]);
        p.zero_grads();
        assert_eq!(p.grads.max_abs(), 0.0);
    }
}
