//! Dense linear algebra, activations, a pinned PRNG and the momentum SGD
//! update shared by every learning component.
//!
//! Everything is `f64`. Matrices are row-major.

use std::ops::{Deref, DerefMut};

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter set shape mismatch at tensor `{0}`")]
    ShapeMismatch(String),
    #[error("non-finite gradient in tensor `{0}`; step skipped")]
    NonFiniteGradient(String),
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(n, 1.0)
    }

    pub fn diagonal(n: usize, value: f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = value;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn random_uniform(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.uniform_range(-scale, scale))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Checked matrix-vector product.
    pub fn matvec(&self, x: &DenseVector) -> Result<DenseVector, NumericsError> {
        if x.len() != self.cols {
            return Err(NumericsError::DimensionMismatch {
                expected: self.cols,
                got: x.len(),
            });
        }
        let mut out = DenseVector::zeros(self.rows);
        self.mul_vec_add(1.0, x, &mut out);
        Ok(out)
    }

    /// `out += alpha * self * x`
    #[inline]
    pub fn mul_vec_add(&self, alpha: f64, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.cols, "matvec input dimension");
        assert_eq!(out.len(), self.rows, "matvec output dimension");
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += alpha * dot(row, x);
        }
    }

    /// `out += alpha * selfᵀ * x`
    #[inline]
    pub fn tr_mul_vec_add(&self, alpha: f64, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.rows, "transposed matvec input dimension");
        assert_eq!(out.len(), self.cols, "transposed matvec output dimension");
        for (&xi, row) in x.iter().zip(self.data.chunks_exact(self.cols)) {
            let a = alpha * xi;
            if a != 0.0 {
                axpy(a, row, out);
            }
        }
    }

    /// `self += alpha * u vᵀ`
    #[inline]
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows, "outer product rows");
        assert_eq!(v.len(), self.cols, "outer product cols");
        let cols = self.cols;
        for (&ui, row) in u.iter().zip(self.data.chunks_exact_mut(cols)) {
            let a = alpha * ui;
            if a != 0.0 {
                axpy(a, v, row);
            }
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &DenseMatrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        axpy(alpha, &other.data, &mut self.data);
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Owned dense vector; dereferences to a slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn random_uniform(dim: usize, scale: f64, rng: &mut SeededRng) -> Self {
        Self((0..dim).map(|_| rng.uniform_range(-scale, scale)).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for DenseVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn tanh_map(x: &[f64]) -> DenseVector {
    DenseVector(x.iter().map(|v| v.tanh()).collect())
}

pub fn tanh_in_place(x: &mut [f64]) {
    for v in x {
        *v = v.tanh();
    }
}

/// Derivative of tanh expressed through its output `y = tanh(x)`.
#[inline]
pub fn tanh_prime(y: f64) -> f64 {
    1.0 - y * y
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> DenseVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    DenseVector(out)
}

/// Deterministic generator: xoshiro256** seeded through SplitMix64.
///
/// The stream for a given seed is fixed across platforms. Floats use the top
/// 53 bits of each output; bounded integers use Lemire's multiply-shift with
/// rejection, so nothing depends on `rand` distribution internals.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: Xoshiro256StarStar,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a worker: `seed XOR worker`.
    pub fn for_worker(&self, worker: u64) -> Self {
        Self::new(self.seed ^ worker)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn between(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// How a tensor participates in regularization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Bias,
    Embedding,
}

pub struct TensorView<'a> {
    pub name: &'static str,
    pub role: TensorRole,
    pub data: &'a [f64],
}

pub struct TensorViewMut<'a> {
    pub name: &'static str,
    pub role: TensorRole,
    pub data: &'a mut [f64],
}

/// A fixed, ordered collection of named parameter tensors.
///
/// Gradients use the same type as the parameters they belong to, so two
/// values of an implementing type always list tensors in the same order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<TensorView<'_>>;
    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Sets every entry to zero, keeping shapes.
    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// ℓ2 coefficient, applied to [`TensorRole::Weight`] tensors only.
    pub l2: f64,
}

/// One velocity buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    velocity: Vec<Vec<f64>>,
}

impl MomentumState {
    pub fn zeros_like<P: ParamSet>(params: &P) -> Self {
        Self {
            velocity: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
        }
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// `v ← μ·v − lr·(g + λ·W)`, `θ ← θ + v`.
///
/// The whole step is rejected, leaving parameters and velocities untouched,
/// if any gradient entry is non-finite.
pub fn sgd_momentum_step<P: ParamSet>(
    params: &mut P,
    grads: &P,
    state: &mut MomentumState,
    cfg: SgdConfig,
) -> Result<(), NumericsError> {
    let grad_tensors = grads.tensors();
    let mut param_tensors = params.tensors_mut();
    if grad_tensors.len() != param_tensors.len() || state.velocity.len() != param_tensors.len() {
        return Err(NumericsError::ShapeMismatch("<tensor count>".into()));
    }
    for ((p, g), v) in param_tensors.iter().zip(&grad_tensors).zip(&state.velocity) {
        if p.data.len() != g.data.len() || p.data.len() != v.len() {
            return Err(NumericsError::ShapeMismatch(p.name.into()));
        }
        if !g.data.iter().all(|x| x.is_finite()) {
            return Err(NumericsError::NonFiniteGradient(g.name.into()));
        }
    }
    for ((p, g), v) in param_tensors
        .iter_mut()
        .zip(&grad_tensors)
        .zip(state.velocity.iter_mut())
    {
        let decay = if p.role == TensorRole::Weight { cfg.l2 } else { 0.0 };
        for ((theta, &grad), vel) in p.data.iter_mut().zip(g.data).zip(v.iter_mut()) {
            *vel = cfg.momentum * *vel - cfg.lr * (grad + decay * *theta);
            *theta += *vel;
        }
    }
    Ok(())
}
