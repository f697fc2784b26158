//! Dense row-major f64 tensor. Deliberately minimal: shape + flat storage,
//! with helpers for the handful of layouts the model uses
//! (`[batch, channel, depth, height, width]` feature volumes and
//! `[batch, features]` embeddings).

use rayon::prelude::*;

use crate::rng::Rng;

/// Below this element count, elementwise ops stay single-threaded.
const PAR_THRESHOLD: usize = 32_768;
const PAR_CHUNK: usize = 16_384;

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Array { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Array { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Array { shape: vec![1], data: vec![v] }
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Array { shape: shape.to_vec(), data }
    }

    pub fn trunc_randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.trunc_normal(std)).collect();
        Array { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Shape as `[b, c, d, h, w]`; panics if rank is not 5.
    pub fn dims5(&self) -> [usize; 5] {
        assert_eq!(self.rank(), 5, "expected rank-5 tensor, got {:?}", self.shape);
        [self.shape[0], self.shape[1], self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn dims2(&self) -> [usize; 2] {
        assert_eq!(self.rank(), 2, "expected rank-2 tensor, got {:?}", self.shape);
        [self.shape[0], self.shape[1]]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bound {dim} at axis {i}");
            off = off * dim + ix;
        }
        off
    }

    /// Elementwise map; runs on fixed-size parallel chunks for large
    /// tensors (bitwise deterministic regardless of thread count).
    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Array {
        let mut data = vec![0.0; self.data.len()];
        if self.data.len() < PAR_THRESHOLD {
            for (o, &x) in data.iter_mut().zip(&self.data) {
                *o = f(x);
            }
        } else {
            data.par_chunks_mut(PAR_CHUNK)
                .zip(self.data.par_chunks(PAR_CHUNK))
                .for_each(|(dst, src)| {
                    for (o, &x) in dst.iter_mut().zip(src) {
                        *o = f(x);
                    }
                });
        }
        Array { shape: self.shape.clone(), data }
    }

    pub fn zip_map(&self, other: &Array, f: impl Fn(f64, f64) -> f64 + Sync) -> Array {
        assert_eq!(self.shape, other.shape, "shape mismatch in zip_map");
        let mut data = vec![0.0; self.data.len()];
        if self.data.len() < PAR_THRESHOLD {
            for ((o, &a), &b) in data.iter_mut().zip(&self.data).zip(&other.data) {
                *o = f(a, b);
            }
        } else {
            data.par_chunks_mut(PAR_CHUNK)
                .zip(self.data.par_chunks(PAR_CHUNK))
                .zip(other.data.par_chunks(PAR_CHUNK))
                .for_each(|((dst, a), b)| {
                    for ((o, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                        *o = f(x, y);
                    }
                });
        }
        Array { shape: self.shape.clone(), data }
    }

    pub fn add_assign(&mut self, other: &Array) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_assign");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn reshaped(&self, shape: &[usize]) -> Array {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} incompatible with length {}",
            shape,
            self.data.len()
        );
        Array { shape: shape.to_vec(), data: self.data.clone() }
    }

    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_row_major() {
        let a = Array::from_vec(&[2, 3], (0..6).map(|i| i as f64).collect());
        assert_eq!(a.at(&[0, 0]), 0.0);
        assert_eq!(a.at(&[0, 2]), 2.0);
        assert_eq!(a.at(&[1, 0]), 3.0);
        assert_eq!(a.at(&[1, 2]), 5.0);
    }

    #[test]
    #[should_panic]
    fn from_vec_rejects_bad_shape() {
        let _ = Array::from_vec(&[2, 2], vec![1.0; 5]);
    }
}
