//! Symbol embedding pretraining with the coding criterion.
//!
//! For every non-leaf node `p` with children `c_1..c_n` the parent's vector
//! should be reproduced by a single tanh layer over its children:
//!
//! ```text
//! coded(p) = tanh( Σ_i l_i · (c_l,i · W_l + c_r,i · W_r) · vec(c_i) + b )
//! d        = ‖vec(p) − coded(p)‖²
//! ```
//!
//! where `l_i` is the share of `p`'s leaves under `c_i` and `(c_l,i, c_r,i)`
//! interpolates between the left and right coding matrices by child
//! position. Training corrupts one symbol of each sample and minimizes the
//! hinge `max(0, Δ + d − d_c)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ast::{AnnotatedAst, SymbolVocab};
use crate::checkpoint::{self, CheckpointError};
use crate::numerics::{
    axpy, sgd_momentum_step, squared_distance, tanh_prime, DenseMatrix, DenseVector,
    MomentumState, NumericsError, ParamSet, SeededRng, SgdConfig, TensorRole, TensorView,
    TensorViewMut,
};

#[derive(Debug, Error, PartialEq)]
pub enum PretrainError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("corpus has no non-leaf nodes to learn from")]
    NoSamples,
    #[error("negative sampling needs at least 2 symbols, vocabulary has {0}")]
    VocabTooSmall(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss")]
    NonFinite,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One vector per symbol id; the last row belongs to `<UNK>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    vectors: DenseMatrix,
}

impl EmbeddingTable {
    /// `n_symbols` real symbols plus the `<UNK>` row, all zero.
    pub fn zeros(n_symbols: usize, dim: usize) -> Self {
        Self {
            vectors: DenseMatrix::zeros(n_symbols + 1, dim),
        }
    }

    /// Uniform `[-scale, scale]` entries; `<UNK>` starts at the mean vector.
    pub fn random(n_symbols: usize, dim: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let mut vectors = DenseMatrix::random_uniform(n_symbols + 1, dim, scale, rng);
        vectors.row_mut(n_symbols).fill(0.0);
        let mut table = Self { vectors };
        table.reset_unk_to_mean();
        table
    }

    pub fn from_matrix(vectors: DenseMatrix) -> Result<Self, PretrainError> {
        if vectors.rows() < 1 || vectors.cols() < 1 {
            return Err(PretrainError::InvalidConfig("embedding table needs at least one row and column".into()));
        }
        Ok(Self { vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Number of real symbols (rows minus `<UNK>`).
    pub fn n_symbols(&self) -> usize {
        self.vectors.rows() - 1
    }

    pub fn unk_id(&self) -> usize {
        self.n_symbols()
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        self.vectors.row(id)
    }

    pub fn vector_mut(&mut self, id: usize) -> &mut [f64] {
        self.vectors.row_mut(id)
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.vectors
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        self.vectors.as_mut_slice()
    }

    /// Sets the `<UNK>` row to the mean of every real symbol's vector.
    pub fn reset_unk_to_mean(&mut self) {
        let n = self.n_symbols();
        let mut mean = vec![0.0; self.dim()];
        if n > 0 {
            for id in 0..n {
                axpy(1.0 / n as f64, self.vectors.row(id), &mut mean);
            }
        }
        self.vectors.row_mut(n).copy_from_slice(&mean);
    }
}

/// Left/right coding matrices and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodingParams {
    pub w_code_l: DenseMatrix,
    pub w_code_r: DenseMatrix,
    pub b_code: DenseVector,
}

impl CodingParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w_code_l: DenseMatrix::zeros(dim, dim),
            w_code_r: DenseMatrix::zeros(dim, dim),
            b_code: DenseVector::zeros(dim),
        }
    }

    pub fn random(dim: usize, scale: f64, rng: &mut SeededRng) -> Self {
        Self {
            w_code_l: DenseMatrix::random_uniform(dim, dim, scale, rng),
            w_code_r: DenseMatrix::random_uniform(dim, dim, scale, rng),
            b_code: DenseVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.b_code.len()
    }
}

/// Everything the coding criterion learns.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainParams {
    pub emb: EmbeddingTable,
    pub coding: CodingParams,
}

impl PretrainParams {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }
}

impl ParamSet for PretrainParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            TensorView { name: "embeddings", role: TensorRole::Embedding, data: self.emb.vectors.as_slice() },
            TensorView { name: "w_code_l", role: TensorRole::Weight, data: self.coding.w_code_l.as_slice() },
            TensorView { name: "w_code_r", role: TensorRole::Weight, data: self.coding.w_code_r.as_slice() },
            TensorView { name: "b_code", role: TensorRole::Bias, data: &self.coding.b_code },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        vec![
            TensorViewMut { name: "embeddings", role: TensorRole::Embedding, data: self.emb.vectors.as_mut_slice() },
            TensorViewMut { name: "w_code_l", role: TensorRole::Weight, data: self.coding.w_code_l.as_mut_slice() },
            TensorViewMut { name: "w_code_r", role: TensorRole::Weight, data: self.coding.w_code_r.as_mut_slice() },
            TensorViewMut { name: "b_code", role: TensorRole::Bias, data: &mut self.coding.b_code },
        ]
    }
}

/// `(c_l, c_r)` for child `i` (1-based) of `n`.
///
/// `c_r = (i−1)/(n−1)`, `c_l = 1 − c_r`; an only child gets `(0.5, 0.5)`.
pub fn coding_coefficients(i: usize, n: usize) -> (f64, f64) {
    debug_assert!(1 <= i && i <= n);
    if n == 1 {
        return (0.5, 0.5);
    }
    let c_r = (i - 1) as f64 / (n - 1) as f64;
    (1.0 - c_r, c_r)
}

/// A parent symbol with its ordered children and their leaf-share weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSample {
    pub parent: usize,
    pub children: Vec<usize>,
    pub leaf_weights: Vec<f64>,
}

impl PretrainSample {
    /// One sample per non-leaf node, in pre-order.
    pub fn from_tree(tree: &AnnotatedAst) -> Vec<PretrainSample> {
        let ast = tree.ast();
        ast.preorder()
            .into_iter()
            .filter(|&i| !ast.is_leaf(i))
            .map(|i| PretrainSample {
                parent: ast.symbol(i),
                children: ast.children(i).iter().map(|&c| ast.symbol(c)).collect(),
                leaf_weights: tree.child_coefficients(i).expect("non-leaf"),
            })
            .collect()
    }

    fn mix(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        child_mix(&self.children, &self.leaf_weights)
    }
}

/// Per-child mixing weights for the left and right coding matrices:
/// `(symbol, l_i·c_l,i, l_i·c_r,i)`.
pub(crate) fn child_mix<'a>(
    children: &'a [usize],
    leaf_weights: &'a [f64],
) -> impl Iterator<Item = (usize, f64, f64)> + 'a {
    let n = children.len();
    children
        .iter()
        .zip(leaf_weights)
        .enumerate()
        .map(move |(k, (&c, &l))| {
            let (cl, cr) = coding_coefficients(k + 1, n);
            (c, l * cl, l * cr)
        })
}

/// Leaf-weighted left/right aggregates of the children's vectors.
fn child_aggregates(sample: &PretrainSample, emb: &EmbeddingTable) -> (Vec<f64>, Vec<f64>) {
    child_aggregates_of(&sample.children, &sample.leaf_weights, emb)
}

pub(crate) fn child_aggregates_of(
    children: &[usize],
    leaf_weights: &[f64],
    emb: &EmbeddingTable,
) -> (Vec<f64>, Vec<f64>) {
    let dim = emb.dim();
    let (mut left, mut right) = (vec![0.0; dim], vec![0.0; dim]);
    for (c, wl, wr) in child_mix(children, leaf_weights) {
        axpy(wl, emb.vector(c), &mut left);
        axpy(wr, emb.vector(c), &mut right);
    }
    (left, right)
}

/// `tanh(W_l·Σ l_i c_l,i v_i + W_r·Σ l_i c_r,i v_i + b)`.
pub fn code_children(sample: &PretrainSample, emb: &EmbeddingTable, coding: &CodingParams) -> DenseVector {
    let (left, right) = child_aggregates(sample, emb);
    let mut z = coding.b_code.clone();
    coding.w_code_l.mul_vec_add(1.0, &left, &mut z);
    coding.w_code_r.mul_vec_add(1.0, &right, &mut z);
    crate::numerics::tanh_in_place(&mut z);
    z
}

/// Squared Euclidean distance between the parent's vector and its coding.
pub fn coding_distance(sample: &PretrainSample, emb: &EmbeddingTable, coding: &CodingParams) -> f64 {
    squared_distance(emb.vector(sample.parent), &code_children(sample, emb, coding))
}

/// Adds `scale · ∂d/∂θ` to `grads` and returns `d`.
fn accumulate_distance_grad(
    sample: &PretrainSample,
    params: &PretrainParams,
    scale: f64,
    grads: &mut PretrainParams,
) -> f64 {
    let (emb, coding) = (&params.emb, &params.coding);
    let dim = emb.dim();
    let (left, right) = child_aggregates(sample, emb);
    let mut y = coding.b_code.clone();
    coding.w_code_l.mul_vec_add(1.0, &left, &mut y);
    coding.w_code_r.mul_vec_add(1.0, &right, &mut y);
    crate::numerics::tanh_in_place(&mut y);

    let parent = emb.vector(sample.parent);
    let residual: Vec<f64> = parent.iter().zip(y.iter()).map(|(p, c)| p - c).collect();
    let d = residual.iter().map(|r| r * r).sum();

    axpy(2.0 * scale, &residual, grads.emb.vector_mut(sample.parent));
    let delta: Vec<f64> = residual
        .iter()
        .zip(y.iter())
        .map(|(r, &yi)| -2.0 * scale * r * tanh_prime(yi))
        .collect();
    grads.coding.w_code_l.add_outer(1.0, &delta, &left);
    grads.coding.w_code_r.add_outer(1.0, &delta, &right);
    axpy(1.0, &delta, &mut grads.coding.b_code);

    let mut d_left = vec![0.0; dim];
    let mut d_right = vec![0.0; dim];
    coding.w_code_l.tr_mul_vec_add(1.0, &delta, &mut d_left);
    coding.w_code_r.tr_mul_vec_add(1.0, &delta, &mut d_right);
    for (c, wl, wr) in sample.mix() {
        let g = grads.emb.vector_mut(c);
        axpy(wl, &d_left, g);
        axpy(wr, &d_right, g);
    }
    d
}

/// `max(0, Δ + d(positive) − d(negative))`.
pub fn hinge_loss(pos: &PretrainSample, neg: &PretrainSample, params: &PretrainParams, margin: f64) -> f64 {
    let d = coding_distance(pos, &params.emb, &params.coding);
    let dc = coding_distance(neg, &params.emb, &params.coding);
    (margin + (d - dc)).max(0.0)
}

/// Hinge loss and its exact gradient. At or below the kink the gradient is
/// zero.
pub fn hinge_gradient(
    pos: &PretrainSample,
    neg: &PretrainSample,
    params: &PretrainParams,
    margin: f64,
) -> (f64, PretrainParams) {
    let mut grads = params.zeros_like();
    let loss = hinge_loss(pos, neg, params, margin);
    if loss > 0.0 {
        accumulate_distance_grad(pos, params, 1.0, &mut grads);
        accumulate_distance_grad(neg, params, -1.0, &mut grads);
    }
    (loss, grads)
}

/// Replaces the symbol at one uniformly chosen position (parent or a child)
/// with a uniformly chosen different symbol among `n_symbols`.
pub fn negative_sample(
    sample: &PretrainSample,
    n_symbols: usize,
    rng: &mut SeededRng,
) -> Result<PretrainSample, PretrainError> {
    if n_symbols < 2 {
        return Err(PretrainError::VocabTooSmall(n_symbols));
    }
    let mut neg = sample.clone();
    let position = rng.below(sample.children.len() + 1);
    let slot = if position == 0 {
        &mut neg.parent
    } else {
        &mut neg.children[position - 1]
    };
    let mut replacement = rng.below(n_symbols - 1);
    if replacement >= *slot {
        replacement += 1;
    }
    *slot = replacement;
    Ok(neg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub n_f: usize,
    pub margin: f64,
    pub lr: f64,
    pub momentum: f64,
    pub l2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_f: 30,
            margin: 1.0,
            lr: 0.03,
            momentum: 0.0,
            l2: 0.0,
            epochs: 20,
            seed: 0,
            init_scale: 0.1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        if self.n_f < 1 {
            return Err(PretrainError::InvalidConfig("n_f must be at least 1".into()));
        }
        if !(self.margin > 0.0) {
            return Err(PretrainError::InvalidConfig("margin must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(PretrainError::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            l2: self.l2,
        }
    }
}

/// One hinge step against a fresh corruption of `sample`. Parameters are
/// untouched when the hinge is inactive.
pub fn pretrain_step(
    sample: &PretrainSample,
    params: &mut PretrainParams,
    state: &mut MomentumState,
    config: &PretrainConfig,
    rng: &mut SeededRng,
) -> Result<f64, PretrainError> {
    let neg = negative_sample(sample, params.emb.n_symbols(), rng)?;
    let (loss, grads) = hinge_gradient(sample, &neg, params, config.margin);
    if !loss.is_finite() {
        return Err(PretrainError::NonFinite);
    }
    if loss > 0.0 {
        sgd_momentum_step(params, &grads, state, config.sgd())?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutput {
    pub params: PretrainParams,
    /// Mean hinge loss per epoch.
    pub loss_curve: Vec<f64>,
}

pub fn init_params(n_symbols: usize, config: &PretrainConfig, rng: &mut SeededRng) -> PretrainParams {
    let emb = EmbeddingTable::random(n_symbols, config.n_f, config.init_scale, rng);
    let coding = CodingParams::random(config.n_f, config.init_scale, rng);
    PretrainParams { emb, coding }
}

/// Trains embeddings and coding parameters over every non-leaf node of the
/// corpus, reshuffling the samples each epoch.
///
/// Steps that produce a non-finite loss are skipped with a warning.
pub fn run_pretrain(
    corpus: &[AnnotatedAst],
    vocab: &SymbolVocab,
    config: &PretrainConfig,
) -> Result<PretrainOutput, PretrainError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(PretrainError::EmptyCorpus);
    }
    if vocab.len() < 2 {
        return Err(PretrainError::VocabTooSmall(vocab.len()));
    }
    let samples: Vec<PretrainSample> = corpus.iter().flat_map(PretrainSample::from_tree).collect();
    if samples.is_empty() {
        return Err(PretrainError::NoSamples);
    }
    let mut rng = SeededRng::new(config.seed);
    let mut params = init_params(vocab.len(), config, &mut rng);
    let mut state = MomentumState::zeros_like(&params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut skipped = 0usize;
        for &i in &order {
            match pretrain_step(&samples[i], &mut params, &mut state, config, &mut rng) {
                Ok(loss) => total += loss,
                Err(PretrainError::NonFinite | PretrainError::Numerics(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if skipped > 0 {
            log::warn!("pretrain epoch {}: skipped {skipped} non-finite steps", epoch + 1);
        }
        let mean = total / (samples.len() - skipped).max(1) as f64;
        log::debug!("pretrain epoch {}: mean hinge {mean:.6}", epoch + 1);
        loss_curve.push(mean);
    }
    params.emb.reset_unk_to_mean();
    Ok(PretrainOutput { params, loss_curve })
}

pub const EMBEDDING_FORMAT: &str = "tbcnn-embeddings";
pub const EMBEDDING_VERSION: u32 = 1;

/// Contents of an embedding checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCheckpoint {
    pub vocab: SymbolVocab,
    pub n_f: usize,
    /// Row-major `(|vocab| + 1) × n_f`; the last row is `<UNK>`.
    pub embeddings: EmbeddingTable,
    pub coding: CodingParams,
}

impl EmbeddingCheckpoint {
    pub fn new(vocab: SymbolVocab, params: PretrainParams) -> Self {
        Self {
            n_f: params.emb.dim(),
            vocab,
            embeddings: params.emb,
            coding: params.coding,
        }
    }

    pub fn to_json(&self) -> String {
        checkpoint::encode(EMBEDDING_FORMAT, EMBEDDING_VERSION, self)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ck: Self = checkpoint::decode(EMBEDDING_FORMAT, EMBEDDING_VERSION, text)?;
        ck.check()?;
        Ok(ck)
    }

    fn check(&self) -> Result<(), CheckpointError> {
        let m = self.embeddings.matrix();
        let ok = m.rows() == self.vocab.len_with_unk()
            && m.cols() == self.n_f
            && m.as_slice().len() == m.rows() * m.cols()
            && self.coding.w_code_l.rows() == self.n_f
            && self.coding.w_code_l.cols() == self.n_f
            && self.coding.w_code_r.rows() == self.n_f
            && self.coding.w_code_r.cols() == self.n_f
            && self.coding.b_code.len() == self.n_f;
        if !ok {
            return Err(CheckpointError::Invalid("embedding checkpoint shapes do not match n_f and vocabulary".into()));
        }
        if !m.is_finite() {
            return Err(CheckpointError::Invalid("non-finite embedding entries".into()));
        }
        Ok(())
    }

    pub fn into_params(self) -> PretrainParams {
        PretrainParams {
            emb: self.embeddings,
            coding: self.coding,
        }
    }
}
