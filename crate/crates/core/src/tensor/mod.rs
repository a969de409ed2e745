//! Dense multi-dimensional arrays with reverse-mode autodiff.
//!
//! `Tensor<f32>` is the working precision everywhere; `Tensor<f64>` exists for
//! gradient verification against finite differences. All reductions accumulate
//! in index order into a single accumulator, so single-threaded runs are
//! bit-reproducible.

mod adamw;
mod io;
pub mod tape;

pub use adamw::AdamW;
pub use io::{read_tensor, write_tensor, TensorIoError};

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssign};
use rand::Rng;

/// Scalar element type: `f32` (default) or `f64` (verification mode).
pub trait Real: Float + NumAssign + Debug + Display + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> f64 {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Contiguous row-major array of `S` with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Real = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
    pub requires_grad: bool,
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); n], requires_grad: false }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::from_f64(value); n],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![S::from_f64(value)])
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Self {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| S::from_f64(v)).collect())
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64(lo + (hi - lo) * rng.gen::<f64>()))
            .collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false }
    }

    /// Gaussian samples via Box-Muller, `N(0, std^2)`.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1 = rng.gen::<f64>().max(1e-300);
            let u2 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(S::from_f64(std * r * theta.cos()));
            if data.len() < n {
                data.push(S::from_f64(std * r * theta.sin()));
            }
        }
        Tensor { shape: shape.to_vec(), data, requires_grad: false }
    }

    /// Sinusoidal position embedding of `pos`, shape `[1, dim]`.
    /// Even slots are sines, odd slots cosines, frequencies 10000^(-2i/dim).
    pub fn sinusoidal_embedding(pos: f64, dim: usize) -> Self {
        assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even, got {dim}");
        let mut data = Vec::with_capacity(dim);
        for i in 0..dim / 2 {
            let freq = (10000f64).powf(-2.0 * i as f64 / dim as f64);
            data.push(S::from_f64((pos * freq).sin()));
            data.push(S::from_f64((pos * freq).cos()));
        }
        Tensor { shape: vec![1, dim], data, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        let c = S::from_f64(c);
        self.map(|v| v * c)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        let (lo, hi) = (S::from_f64(lo), S::from_f64(hi));
        self.map(|v| v.max(lo).min(hi))
    }

    fn zip(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in elementwise op");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        }
    }

    /// Sum in index order into one accumulator.
    pub fn sum(&self) -> f64 {
        let mut acc = S::zero();
        for &v in &self.data {
            acc += v;
        }
        acc.to_f64()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0f64, |m, &v| m.max(v.to_f64().abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0f64, |m, (&a, &b)| m.max((a.to_f64() - b.to_f64()).abs()))
    }

    pub fn mse(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        let mut acc = 0f64;
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            let d = a.to_f64() - b.to_f64();
            acc += d * d;
        }
        acc / self.data.len() as f64
    }

    /// Plain 2-D matrix product, for tests and non-recorded math.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.shape.len(), 2);
        assert_eq!(other.shape.len(), 2);
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul inner dims: {k} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        matmul(&self.data, &other.data, &mut out, m, k, n);
        Tensor { shape: vec![m, n], data: out, requires_grad: false }
    }

    pub fn transpose2d(&self) -> Self {
        assert_eq!(self.shape.len(), 2);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out, requires_grad: false }
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.data.len() {
            if self.data[i] > self.data[best] {
                best = i;
            }
        }
        best
    }
}

// ── shared kernels ───────────────────────────────────────────────────

/// out += a[m,k] @ b[k,n], ikj order (inner loop streams rows of b and out).
pub(crate) fn matmul<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out += a[m,k] @ b[n,k]^T, row-dot form.
pub(crate) fn matmul_nt<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out += a[m,k]^T @ b[m,n].
pub(crate) fn matmul_tn<S: Real>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}
