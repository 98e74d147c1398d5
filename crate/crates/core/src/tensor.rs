//! Dense row-major n-dimensional arrays.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. Every extent is positive and
/// `shape.iter().product() == data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            bail!(
                Dimension,
                "shape {:?} holds {} elements but {} were supplied",
                shape,
                n,
                data.len()
            );
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        check_shape(&shape).expect("positive extents");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a tensor from a function of the flat row-major index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        check_shape(&shape).expect("positive extents");
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Zero-mean normal samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    /// Uniform samples on `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Last extent; 1 for rank-0-like shapes.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn into_reshaped(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range for axis {i} of extent {ext}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Left-to-right sum of all elements.
    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "shape mismatch in comparison");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &a| m.max(a.abs()))
    }

    /// `max |a-b| / max(max |b|, tiny)`, the relative error used by oracle tests.
    pub fn rel_err(&self, reference: &Self) -> f64 {
        let diff = self.max_abs_diff(reference).as_f64();
        let scale = reference.max_abs().as_f64().max(1e-300);
        diff / scale
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Value-level matrix product, used outside the tape (inference helpers, oracles of
    /// other layers). Shares the kernel with the differentiable op.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = as_matrix(self)?;
        let (k2, n) = as_matrix(other)?;
        if k != k2 {
            bail!(
                Dimension,
                "matmul inner extents differ: {:?} x {:?}",
                self.shape,
                other.shape
            );
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(&self.data, &other.data, &mut out, m, k, n);
        Self::new([m, n], out)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (m, n) = as_matrix(self)?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new([n, m], out)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        bail!(Dimension, "tensor shape must have at least one axis");
    }
    if shape.contains(&0) {
        bail!(Dimension, "tensor extents must be positive, got {:?}", shape);
    }
    Ok(())
}

pub(crate) fn as_matrix<T>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [m, n] => Ok((*m, *n)),
        other => bail!(Dimension, "expected a matrix, got shape {:?}", other),
    }
}

/// Raw kernels over row-major slices.
///
/// Every reduction accumulates strictly left to right over the contracted index,
/// so results are bit-reproducible for identical inputs.
pub mod kernels {
    use crate::scalar::Scalar;

    const ROW_BLOCK: usize = 4;
    const COL_BLOCK: usize = 512;

    /// `out[m×n] += a[m×k] · b[k×n]`, with `out` assumed zeroed by the caller
    /// when a plain product is wanted.
    pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        // Each out[i, j] sees b[p, j] terms in ascending p; blocking only changes
        // which (i, j) pairs are in flight, never the order per element.
        for i0 in (0..m).step_by(ROW_BLOCK) {
            let i1 = (i0 + ROW_BLOCK).min(m);
            for j0 in (0..n).step_by(COL_BLOCK) {
                let j1 = (j0 + COL_BLOCK).min(n);
                for p in 0..k {
                    let brow = &b[p * n + j0..p * n + j1];
                    for i in i0..i1 {
                        let aip = a[i * k + p];
                        let orow = &mut out[i * n + j0..i * n + j1];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o += aip * bv;
                        }
                    }
                }
            }
        }
    }

    /// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                out[i * n + j] += acc;
            }
        }
    }

    /// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
    pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), m * n);
        debug_assert_eq!(out.len(), k * n);
        for p in 0..m {
            let brow = &b[p * n..(p + 1) * n];
            for i in 0..k {
                let api = a[p * k + i];
                if api == T::zero() {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += api * bv;
                }
            }
        }
    }

    /// Row-major strides for `shape`.
    pub fn strides(shape: &[usize]) -> Vec<usize> {
        let mut s = vec![1; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * shape[i + 1];
        }
        s
    }

    /// Gathers `src` (with `shape`) into `out` so that output axis `i` walks input axis `axes[i]`.
    pub fn permute<T: Copy>(src: &[T], shape: &[usize], axes: &[usize], out: &mut Vec<T>) {
        let rank = shape.len();
        let in_strides = strides(shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let walk: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        out.clear();
        out.reserve(src.len());
        if src.is_empty() {
            return;
        }
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        let last = rank - 1;
        let inner = out_shape[last];
        let inner_stride = walk[last];
        loop {
            let mut o = offset;
            for _ in 0..inner {
                out.push(src[o]);
                o += inner_stride;
            }
            // advance the outer counters
            let mut ax = last;
            loop {
                if ax == 0 {
                    return;
                }
                ax -= 1;
                idx[ax] += 1;
                offset += walk[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= walk[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
}
