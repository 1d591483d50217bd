//! Dense row-major tensors.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Self::new(shape, data.iter().map(|&v| S::from_f32(v)).collect())
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&v| S::from_f64(v)).collect())
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                S::from_f64(z * std)
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect() }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.as_f32()).collect()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Row `i` of the tensor viewed as `[rows, last_dim]`.
    pub fn row(&self, i: usize) -> &[S] {
        let d = *self.shape.last().unwrap_or(&1);
        &self.data[i * d..(i + 1) * d]
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies out a general axis permutation.
    pub fn permute(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.shape.len(), "permute rank mismatch");
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        permute_into(&self.data, &out_shape, &src_strides, &mut out);
        Self { shape: out_shape, data: out }
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        assert!(start + len <= self.shape[axis], "narrow out of range");
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self { shape, data }
    }

    pub fn concat(parts: &[&Tensor<S>], axis: usize) -> Self {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for p in parts {
            assert_eq!(p.ndim(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in p.shape().iter().zip(first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {:?} vs {:?}", p.shape(), first);
            }
            total += p.shape()[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        Self { shape, data }
    }
}

fn permute_into<S: Copy>(src: &[S], out_shape: &[usize], src_strides: &[usize], out: &mut Vec<S>) {
    let rank = out_shape.len();
    if rank == 0 {
        out.push(src[0]);
        return;
    }
    if out_shape.contains(&0) {
        return;
    }
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let last_len = out_shape[last];
    let last_stride = src_strides[last];
    loop {
        let base: usize = idx.iter().zip(src_strides).map(|(i, s)| i * s).sum();
        if last_stride == 1 {
            out.extend_from_slice(&src[base..base + last_len]);
        } else {
            for j in 0..last_len {
                out.push(src[base + j * last_stride]);
            }
        }
        // advance all but the last axis
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes_matrix() {
        let t = Tensor::<f32>::from_f32(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let p = t.permute(&[1, 0]);
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1., 4., 2., 5., 3., 6.]);
        assert_eq!(p.permute(&[1, 0]), t);
    }

    #[test]
    fn narrow_and_concat_are_inverse() {
        let t = Tensor::<f64>::from_f64(&[2, 4], &[0., 1., 2., 3., 4., 5., 6., 7.]);
        let a = t.narrow(1, 0, 1);
        let b = t.narrow(1, 1, 3);
        assert_eq!(a.data(), &[0., 4.]);
        assert_eq!(Tensor::concat(&[&a, &b], 1), t);
    }
}
