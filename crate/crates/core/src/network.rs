//! The tree-based convolutional network: coding-layer combination,
//! continuous-binary-tree convolution, 3-way max pooling, a tanh hidden
//! layer and a softmax output, with exact hand-derived backpropagation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ast::{AnnotatedAst, SymbolVocab};
use crate::baselines::{self, BowVector};
use crate::checkpoint::{self, CheckpointError};
use crate::numerics::{
    axpy, softmax, tanh_in_place, tanh_prime, DenseMatrix, DenseVector, ParamSet, SeededRng,
    TensorRole, TensorView, TensorViewMut,
};
use crate::pretrain::{child_aggregates_of, child_mix, CodingParams, EmbeddingTable, PretrainParams};

/// Default TOP-region threshold factor.
pub const DEFAULT_POOL_K: f64 = 0.6;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("symbol id {0} out of range for the embedding table")]
    SymbolOutOfRange(usize),
    #[error("bag-of-words features have dimension {got}, model expects {expected}")]
    BowDimension { expected: usize, got: usize },
    #[error("bag-of-words features given to a model without a bag-of-words input")]
    UnexpectedBow,
    #[error("model expects bag-of-words features")]
    MissingBow,
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("forward trace does not belong to this tree/parameter set")]
    StaleTrace,
    #[error("invalid shape: {0}")]
    Shape(String),
}

/// Layer sizes and the pooling threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub n_f: usize,
    pub n_c: usize,
    pub n_h: usize,
    pub n_classes: usize,
    pub k: f64,
    /// Width of the appended bag-of-words input, 0 when disabled.
    pub bow_dim: usize,
}

impl Hyper {
    pub fn hidden_input_dim(&self) -> usize {
        3 * self.n_c + self.bow_dim
    }
}

/// The full trainable parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TbcnnParams {
    pub emb: EmbeddingTable,
    pub coding: CodingParams,
    pub w_comb1: DenseMatrix,
    pub w_comb2: DenseMatrix,
    pub w_conv_t: DenseMatrix,
    pub w_conv_l: DenseMatrix,
    pub w_conv_r: DenseMatrix,
    pub b_conv: DenseVector,
    pub w_hid: DenseMatrix,
    pub b_hid: DenseVector,
    pub w_out: DenseMatrix,
    pub b_out: DenseVector,
}

impl TbcnnParams {
    pub fn zeros(hyper: &Hyper, n_symbols: usize) -> Self {
        let Hyper { n_f, n_c, n_h, n_classes, .. } = *hyper;
        Self {
            emb: EmbeddingTable::zeros(n_symbols, n_f),
            coding: CodingParams::zeros(n_f),
            w_comb1: DenseMatrix::zeros(n_f, n_f),
            w_comb2: DenseMatrix::zeros(n_f, n_f),
            w_conv_t: DenseMatrix::zeros(n_c, n_f),
            w_conv_l: DenseMatrix::zeros(n_c, n_f),
            w_conv_r: DenseMatrix::zeros(n_c, n_f),
            b_conv: DenseVector::zeros(n_c),
            w_hid: DenseMatrix::zeros(n_h, hyper.hidden_input_dim()),
            b_hid: DenseVector::zeros(n_h),
            w_out: DenseMatrix::zeros(n_classes, n_h),
            b_out: DenseVector::zeros(n_classes),
        }
    }

    /// Fresh parameters. Embeddings and coding come from `pretrained` when
    /// given, otherwise they are drawn like every other weight: uniform in
    /// `[-init_scale, init_scale]`. The combination matrices start as
    /// `comb_diag · I`; biases start at zero.
    pub fn init(
        hyper: &Hyper,
        n_symbols: usize,
        pretrained: Option<&PretrainParams>,
        init_scale: f64,
        comb_diag: f64,
        rng: &mut SeededRng,
    ) -> Result<Self, NetworkError> {
        let Hyper { n_f, n_c, n_h, n_classes, .. } = *hyper;
        // Drawn unconditionally so both init modes share the rest of the stream.
        let random_emb = EmbeddingTable::random(n_symbols, n_f, init_scale, rng);
        let random_coding = CodingParams::random(n_f, init_scale, rng);
        let (emb, coding) = match pretrained {
            Some(p) => {
                if p.emb.dim() != n_f || p.emb.n_symbols() != n_symbols {
                    return Err(NetworkError::Shape(format!(
                        "pretrained table is {}x{}, model needs {}x{}",
                        p.emb.n_symbols(),
                        p.emb.dim(),
                        n_symbols,
                        n_f
                    )));
                }
                (p.emb.clone(), p.coding.clone())
            }
            None => (random_emb, random_coding),
        };
        let mut u = |r, c| DenseMatrix::random_uniform(r, c, init_scale, rng);
        Ok(Self {
            emb,
            coding,
            w_comb1: DenseMatrix::diagonal(n_f, comb_diag),
            w_comb2: DenseMatrix::diagonal(n_f, comb_diag),
            w_conv_t: u(n_c, n_f),
            w_conv_l: u(n_c, n_f),
            w_conv_r: u(n_c, n_f),
            b_conv: DenseVector::zeros(n_c),
            w_hid: u(n_h, hyper.hidden_input_dim()),
            b_hid: DenseVector::zeros(n_h),
            w_out: u(n_classes, n_h),
            b_out: DenseVector::zeros(n_classes),
        })
    }

    pub fn n_f(&self) -> usize {
        self.emb.dim()
    }

    pub fn n_c(&self) -> usize {
        self.b_conv.len()
    }

    pub fn n_h(&self) -> usize {
        self.b_hid.len()
    }

    pub fn n_classes(&self) -> usize {
        self.b_out.len()
    }

    pub fn bow_dim(&self) -> usize {
        self.w_hid.cols() - 3 * self.n_c()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    /// Checks every tensor against `(n_f, n_c, n_h, n_classes, bow_dim)`.
    pub fn check_shapes(&self, hyper: &Hyper) -> Result<(), NetworkError> {
        let (f, c, h, k) = (hyper.n_f, hyper.n_c, hyper.n_h, hyper.n_classes);
        let mats = [
            ("w_code_l", &self.coding.w_code_l, f, f),
            ("w_code_r", &self.coding.w_code_r, f, f),
            ("w_comb1", &self.w_comb1, f, f),
            ("w_comb2", &self.w_comb2, f, f),
            ("w_conv_t", &self.w_conv_t, c, f),
            ("w_conv_l", &self.w_conv_l, c, f),
            ("w_conv_r", &self.w_conv_r, c, f),
            ("w_hid", &self.w_hid, h, hyper.hidden_input_dim()),
            ("w_out", &self.w_out, k, h),
        ];
        for (name, m, r, cols) in mats {
            if m.rows() != r || m.cols() != cols || m.as_slice().len() != r * cols {
                return Err(NetworkError::Shape(format!("{name} is {}x{}, expected {r}x{cols}", m.rows(), m.cols())));
            }
        }
        let vecs = [
            ("b_code", &self.coding.b_code, f),
            ("b_conv", &self.b_conv, c),
            ("b_hid", &self.b_hid, h),
            ("b_out", &self.b_out, k),
        ];
        for (name, v, n) in vecs {
            if v.len() != n {
                return Err(NetworkError::Shape(format!("{name} has length {}, expected {n}", v.len())));
            }
        }
        if self.emb.dim() != f {
            return Err(NetworkError::Shape("embedding width differs from n_f".into()));
        }
        Ok(())
    }
}

impl ParamSet for TbcnnParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        use TensorRole::*;
        vec![
            TensorView { name: "embeddings", role: Embedding, data: self.emb.matrix().as_slice() },
            TensorView { name: "w_code_l", role: Weight, data: self.coding.w_code_l.as_slice() },
            TensorView { name: "w_code_r", role: Weight, data: self.coding.w_code_r.as_slice() },
            TensorView { name: "b_code", role: Bias, data: &self.coding.b_code },
            TensorView { name: "w_comb1", role: Weight, data: self.w_comb1.as_slice() },
            TensorView { name: "w_comb2", role: Weight, data: self.w_comb2.as_slice() },
            TensorView { name: "w_conv_t", role: Weight, data: self.w_conv_t.as_slice() },
            TensorView { name: "w_conv_l", role: Weight, data: self.w_conv_l.as_slice() },
            TensorView { name: "w_conv_r", role: Weight, data: self.w_conv_r.as_slice() },
            TensorView { name: "b_conv", role: Bias, data: &self.b_conv },
            TensorView { name: "w_hid", role: Weight, data: self.w_hid.as_slice() },
            TensorView { name: "b_hid", role: Bias, data: &self.b_hid },
            TensorView { name: "w_out", role: Weight, data: self.w_out.as_slice() },
            TensorView { name: "b_out", role: Bias, data: &self.b_out },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        use TensorRole::*;
        vec![
            TensorViewMut { name: "embeddings", role: Embedding, data: self.emb.as_mut_slice() },
            TensorViewMut { name: "w_code_l", role: Weight, data: self.coding.w_code_l.as_mut_slice() },
            TensorViewMut { name: "w_code_r", role: Weight, data: self.coding.w_code_r.as_mut_slice() },
            TensorViewMut { name: "b_code", role: Bias, data: &mut self.coding.b_code },
            TensorViewMut { name: "w_comb1", role: Weight, data: self.w_comb1.as_mut_slice() },
            TensorViewMut { name: "w_comb2", role: Weight, data: self.w_comb2.as_mut_slice() },
            TensorViewMut { name: "w_conv_t", role: Weight, data: self.w_conv_t.as_mut_slice() },
            TensorViewMut { name: "w_conv_l", role: Weight, data: self.w_conv_l.as_mut_slice() },
            TensorViewMut { name: "w_conv_r", role: Weight, data: self.w_conv_r.as_mut_slice() },
            TensorViewMut { name: "b_conv", role: Bias, data: &mut self.b_conv },
            TensorViewMut { name: "w_hid", role: Weight, data: self.w_hid.as_mut_slice() },
            TensorViewMut { name: "b_hid", role: Bias, data: &mut self.b_hid },
            TensorViewMut { name: "w_out", role: Weight, data: self.w_out.as_mut_slice() },
            TensorViewMut { name: "b_out", role: Bias, data: &mut self.b_out },
        ]
    }
}

/// Position of a node inside a depth-2 convolution window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowLevel {
    Top,
    /// Child `position` (1-based) of `siblings` children.
    Bottom { position: usize, siblings: usize },
}

/// `(η_t, η_l, η_r)` for a node of a depth-2 window.
///
/// In-window depth is counted from the bottom, so the top node has depth 2
/// and receives `η_t = 1`; children have depth 1 and split between left and
/// right by position: `η_r = (p−1)/(n−1)` (0.5 for an only child),
/// `η_l = 1 − η_r`.
pub fn conv_coefficients(level: WindowLevel) -> (f64, f64, f64) {
    const WINDOW_DEPTH: f64 = 2.0;
    let (depth_in_window, position, siblings) = match level {
        WindowLevel::Top => (2.0, 1, 1),
        WindowLevel::Bottom { position, siblings } => (1.0, position, siblings),
    };
    let eta_t = (depth_in_window - 1.0) / (WINDOW_DEPTH - 1.0);
    let eta_r = (1.0 - eta_t) * position_ratio(position, siblings);
    let eta_l = (1.0 - eta_t) * (1.0 - position_ratio(position, siblings));
    (eta_t, eta_l, eta_r)
}

/// The same formulas with in-window depth counted from the top (top node
/// depth 1). Only used for diagnostics; it gives the top node `η_t = 0`.
pub fn conv_coefficients_top_down(level: WindowLevel) -> (f64, f64, f64) {
    let (depth_in_window, position, siblings) = match level {
        WindowLevel::Top => (1.0, 1, 1),
        WindowLevel::Bottom { position, siblings } => (2.0, position, siblings),
    };
    let eta_t = depth_in_window - 1.0;
    let eta_r = (1.0 - eta_t) * position_ratio(position, siblings);
    let eta_l = (1.0 - eta_t) * (1.0 - eta_r);
    (eta_t, eta_l, eta_r)
}

fn position_ratio(position: usize, siblings: usize) -> f64 {
    if siblings == 1 {
        0.5
    } else {
        (position - 1) as f64 / (siblings - 1) as f64
    }
}

/// Per-node input vectors for the convolution. Leaves use their embedding;
/// a non-leaf `p` uses `W_comb1·vec(p) + W_comb2·coded(p)`, where the coded
/// term is built from its children's embeddings. The second element holds
/// the coded vector of each non-leaf node.
pub fn combined_node_vectors(
    tree: &AnnotatedAst,
    params: &TbcnnParams,
) -> Result<(Vec<DenseVector>, Vec<Option<DenseVector>>), NetworkError> {
    let ast = tree.ast();
    let n_ids = params.emb.n_symbols() + 1;
    if let Some(bad) = ast.nodes().iter().map(|n| n.symbol).find(|&s| s >= n_ids) {
        return Err(NetworkError::SymbolOutOfRange(bad));
    }
    let n_f = params.n_f();
    let mut combined = Vec::with_capacity(ast.len());
    let mut coded = Vec::with_capacity(ast.len());
    for i in 0..ast.len() {
        let own = params.emb.vector(ast.symbol(i));
        if ast.is_leaf(i) {
            combined.push(DenseVector::from(own.to_vec()));
            coded.push(None);
            continue;
        }
        let u = code_node(tree, i, params);
        let mut x = DenseVector::zeros(n_f);
        params.w_comb1.mul_vec_add(1.0, own, &mut x);
        params.w_comb2.mul_vec_add(1.0, &u, &mut x);
        combined.push(x);
        coded.push(Some(u));
    }
    Ok((combined, coded))
}

fn child_symbols(tree: &AnnotatedAst, node: usize) -> Vec<usize> {
    let ast = tree.ast();
    ast.children(node).iter().map(|&c| ast.symbol(c)).collect()
}

fn code_node(tree: &AnnotatedAst, node: usize, params: &TbcnnParams) -> DenseVector {
    let weights = tree.child_coefficients(node).expect("non-leaf");
    let (left, right) = child_aggregates_of(&child_symbols(tree, node), &weights, &params.emb);
    let mut z = params.coding.b_code.clone();
    params.coding.w_code_l.mul_vec_add(1.0, &left, &mut z);
    params.coding.w_code_r.mul_vec_add(1.0, &right, &mut z);
    tanh_in_place(&mut z);
    z
}

/// η-weighted sums of a node's children's vectors: `(Σ η_l x_c, Σ η_r x_c)`.
fn window_aggregates(tree: &AnnotatedAst, node: usize, xs: &[DenseVector]) -> (Vec<f64>, Vec<f64>) {
    let kids = tree.ast().children(node);
    let dim = xs[node].len();
    let (mut left, mut right) = (vec![0.0; dim], vec![0.0; dim]);
    for (k, &c) in kids.iter().enumerate() {
        let (_, eta_l, eta_r) = conv_coefficients(WindowLevel::Bottom {
            position: k + 1,
            siblings: kids.len(),
        });
        axpy(eta_l, &xs[c], &mut left);
        axpy(eta_r, &xs[c], &mut right);
    }
    (left, right)
}

/// One depth-2 window per node (the node plus its children), producing a
/// feature tree of the same shape. Leaves see only their own top term.
pub fn tree_convolve(
    node_vectors: &[DenseVector],
    tree: &AnnotatedAst,
    params: &TbcnnParams,
) -> Result<Vec<DenseVector>, NetworkError> {
    if node_vectors.len() != tree.len() {
        return Err(NetworkError::Shape(format!(
            "{} node vectors for a {}-node tree",
            node_vectors.len(),
            tree.len()
        )));
    }
    if let Some(v) = node_vectors.iter().find(|v| v.len() != params.n_f()) {
        return Err(NetworkError::Shape(format!("node vector of width {}, expected {}", v.len(), params.n_f())));
    }
    Ok((0..tree.len())
        .map(|q| {
            let mut z = params.b_conv.clone();
            params.w_conv_t.mul_vec_add(1.0, &node_vectors[q], &mut z);
            if !tree.ast().is_leaf(q) {
                let (left, right) = window_aggregates(tree, q, node_vectors);
                params.w_conv_l.mul_vec_add(1.0, &left, &mut z);
                params.w_conv_r.mul_vec_add(1.0, &right, &mut z);
            }
            tanh_in_place(&mut z);
            z
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Top,
    LowerLeft,
    LowerRight,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Top, Region::LowerLeft, Region::LowerRight];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Pooling region of every node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolAssignment {
    pub regions: Vec<Region>,
}

impl PoolAssignment {
    pub fn members(&self, region: Region) -> impl Iterator<Item = usize> + '_ {
        self.regions
            .iter()
            .enumerate()
            .filter(move |(_, &r)| r == region)
            .map(|(i, _)| i)
    }
}

/// TOP when `depth < k · mean leaf depth`; otherwise LOWER_LEFT when the
/// node's leaf-span midpoint is at or left of the center, else LOWER_RIGHT.
pub fn assign_pool_regions(tree: &AnnotatedAst, k: f64) -> PoolAssignment {
    let threshold = k * tree.mean_leaf_depth();
    let regions = (0..tree.len())
        .map(|i| {
            if (tree.depth(i) as f64) < threshold {
                Region::Top
            } else if tree.h_pos(i) <= 0.5 {
                Region::LowerLeft
            } else {
                Region::LowerRight
            }
        })
        .collect();
    PoolAssignment { regions }
}

/// Per-dimension maxima for each region, indexed by [`Region::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub vectors: [DenseVector; 3],
    /// Winning node per dimension; `None` for an empty region.
    pub argmax: [Vec<Option<usize>>; 3],
}

impl Pooled {
    pub fn concat(&self) -> Vec<f64> {
        self.vectors.iter().flat_map(|v| v.iter().copied()).collect()
    }
}

/// Max pooling over each region. Empty regions give zeros; ties go to the
/// smallest node index.
pub fn pool_max(conv: &[DenseVector], assignment: &PoolAssignment) -> Pooled {
    let dim = conv.first().map_or(0, |v| v.len());
    let mut vectors = [DenseVector::zeros(dim), DenseVector::zeros(dim), DenseVector::zeros(dim)];
    let mut argmax: [Vec<Option<usize>>; 3] = [vec![None; dim], vec![None; dim], vec![None; dim]];
    for (node, (y, region)) in conv.iter().zip(&assignment.regions).enumerate() {
        let r = region.index();
        for j in 0..dim {
            let better = match argmax[r][j] {
                None => true,
                Some(_) => y[j] > vectors[r][j],
            };
            if better {
                vectors[r][j] = y[j];
                argmax[r][j] = Some(node);
            }
        }
    }
    Pooled { vectors, argmax }
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub combined: Vec<DenseVector>,
    pub coded: Vec<Option<DenseVector>>,
    pub conv: Vec<DenseVector>,
    pub assignment: PoolAssignment,
    pub pooled: Pooled,
    /// Hidden-layer input: pooled vectors, then transformed counts if any.
    pub features: DenseVector,
    pub hidden: DenseVector,
    pub probabilities: DenseVector,
}

impl ForwardTrace {
    pub fn loss(&self, label: usize) -> f64 {
        -self.probabilities[label].ln()
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.probabilities)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn forward(
    tree: &AnnotatedAst,
    params: &TbcnnParams,
    k: f64,
    bow: Option<&BowVector>,
) -> Result<ForwardTrace, NetworkError> {
    let bow_dim = params.bow_dim();
    match (bow, bow_dim) {
        (Some(_), 0) => return Err(NetworkError::UnexpectedBow),
        (None, d) if d > 0 => return Err(NetworkError::MissingBow),
        (Some(b), d) if b.dim() != d => return Err(NetworkError::BowDimension { expected: d, got: b.dim() }),
        _ => {}
    }
    let (combined, coded) = combined_node_vectors(tree, params)?;
    let conv = tree_convolve(&combined, tree, params)?;
    let assignment = assign_pool_regions(tree, k);
    let pooled = pool_max(&conv, &assignment);
    let features = DenseVector::from(match bow {
        Some(b) => baselines::combine_tbcnn_bow(&pooled.concat(), b),
        None => pooled.concat(),
    });
    let mut hidden = params.b_hid.clone();
    params.w_hid.mul_vec_add(1.0, &features, &mut hidden);
    tanh_in_place(&mut hidden);
    let mut logits = params.b_out.clone();
    params.w_out.mul_vec_add(1.0, &hidden, &mut logits);
    let probabilities = softmax(&logits);
    Ok(ForwardTrace {
        combined,
        coded,
        conv,
        assignment,
        pooled,
        features,
        hidden,
        probabilities,
    })
}

/// Exact gradient of `−ln p[label]` with respect to every tensor.
pub fn backward(
    tree: &AnnotatedAst,
    trace: &ForwardTrace,
    label: usize,
    params: &TbcnnParams,
) -> Result<TbcnnParams, NetworkError> {
    let mut grads = params.zeros_like();
    accumulate_gradients(tree, trace, label, params, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but adds into an existing gradient buffer.
pub fn accumulate_gradients(
    tree: &AnnotatedAst,
    trace: &ForwardTrace,
    label: usize,
    params: &TbcnnParams,
    grads: &mut TbcnnParams,
) -> Result<(), NetworkError> {
    let n_classes = params.n_classes();
    if label >= n_classes {
        return Err(NetworkError::LabelOutOfRange { label, n_classes });
    }
    let n = tree.len();
    let (n_f, n_c, n_h) = (params.n_f(), params.n_c(), params.n_h());
    if trace.combined.len() != n
        || trace.conv.len() != n
        || trace.probabilities.len() != n_classes
        || trace.hidden.len() != n_h
        || trace.features.len() != params.w_hid.cols()
        || trace.combined.iter().any(|x| x.len() != n_f)
    {
        return Err(NetworkError::StaleTrace);
    }
    let ast = tree.ast();

    // Output and hidden layers.
    let mut d_logits = trace.probabilities.to_vec();
    d_logits[label] -= 1.0;
    grads.w_out.add_outer(1.0, &d_logits, &trace.hidden);
    axpy(1.0, &d_logits, &mut grads.b_out);
    let mut d_hidden = vec![0.0; n_h];
    params.w_out.tr_mul_vec_add(1.0, &d_logits, &mut d_hidden);
    for (d, &h) in d_hidden.iter_mut().zip(trace.hidden.iter()) {
        *d *= tanh_prime(h);
    }
    grads.w_hid.add_outer(1.0, &d_hidden, &trace.features);
    axpy(1.0, &d_hidden, &mut grads.b_hid);
    let mut d_features = vec![0.0; params.w_hid.cols()];
    params.w_hid.tr_mul_vec_add(1.0, &d_hidden, &mut d_features);

    // Max pooling routes each pooled coordinate to its winning node.
    let mut d_conv = vec![vec![0.0; n_c]; n];
    for region in Region::ALL {
        let r = region.index();
        for j in 0..n_c {
            if let Some(node) = trace.pooled.argmax[r][j] {
                d_conv[node][j] += d_features[r * n_c + j];
            }
        }
    }

    // Convolution.
    let mut d_combined = vec![vec![0.0; n_f]; n];
    for q in 0..n {
        if d_conv[q].iter().all(|&g| g == 0.0) {
            continue;
        }
        let dz: Vec<f64> = d_conv[q]
            .iter()
            .zip(trace.conv[q].iter())
            .map(|(g, &y)| g * tanh_prime(y))
            .collect();
        axpy(1.0, &dz, &mut grads.b_conv);
        grads.w_conv_t.add_outer(1.0, &dz, &trace.combined[q]);
        params.w_conv_t.tr_mul_vec_add(1.0, &dz, &mut d_combined[q]);
        let kids = ast.children(q);
        if kids.is_empty() {
            continue;
        }
        let (left, right) = window_aggregates(tree, q, &trace.combined);
        grads.w_conv_l.add_outer(1.0, &dz, &left);
        grads.w_conv_r.add_outer(1.0, &dz, &right);
        let mut g_left = vec![0.0; n_f];
        let mut g_right = vec![0.0; n_f];
        params.w_conv_l.tr_mul_vec_add(1.0, &dz, &mut g_left);
        params.w_conv_r.tr_mul_vec_add(1.0, &dz, &mut g_right);
        for (k, &c) in kids.iter().enumerate() {
            let (_, eta_l, eta_r) = conv_coefficients(WindowLevel::Bottom {
                position: k + 1,
                siblings: kids.len(),
            });
            axpy(eta_l, &g_left, &mut d_combined[c]);
            axpy(eta_r, &g_right, &mut d_combined[c]);
        }
    }

    // Coding layer and embeddings.
    for q in 0..n {
        let dx = &d_combined[q];
        if dx.iter().all(|&g| g == 0.0) {
            continue;
        }
        let sym = ast.symbol(q);
        let Some(u) = &trace.coded[q] else {
            axpy(1.0, dx, grads.emb.vector_mut(sym));
            continue;
        };
        params.w_comb1.tr_mul_vec_add(1.0, dx, grads.emb.vector_mut(sym));
        grads.w_comb1.add_outer(1.0, dx, params.emb.vector(sym));
        grads.w_comb2.add_outer(1.0, dx, u);
        let mut dv = vec![0.0; n_f];
        params.w_comb2.tr_mul_vec_add(1.0, dx, &mut dv);
        for (d, &ui) in dv.iter_mut().zip(u.iter()) {
            *d *= tanh_prime(ui);
        }
        axpy(1.0, &dv, &mut grads.coding.b_code);
        let children = child_symbols(tree, q);
        let weights = tree.child_coefficients(q).expect("non-leaf");
        let (left, right) = child_aggregates_of(&children, &weights, &params.emb);
        grads.coding.w_code_l.add_outer(1.0, &dv, &left);
        grads.coding.w_code_r.add_outer(1.0, &dv, &right);
        let mut g_left = vec![0.0; n_f];
        let mut g_right = vec![0.0; n_f];
        params.coding.w_code_l.tr_mul_vec_add(1.0, &dv, &mut g_left);
        params.coding.w_code_r.tr_mul_vec_add(1.0, &dv, &mut g_right);
        for (c, wl, wr) in child_mix(&children, &weights) {
            let g = grads.emb.vector_mut(c);
            axpy(wl, &g_left, g);
            axpy(wr, &g_right, g);
        }
    }
    Ok(())
}

pub const MODEL_FORMAT: &str = "tbcnn-model";
pub const MODEL_VERSION: u32 = 1;

/// A trained network together with its vocabulary and layer sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TbcnnModel {
    pub hyper: Hyper,
    pub vocab: SymbolVocab,
    pub params: TbcnnParams,
}

impl TbcnnModel {
    pub fn new(hyper: Hyper, vocab: SymbolVocab, params: TbcnnParams) -> Result<Self, NetworkError> {
        params.check_shapes(&hyper)?;
        if params.emb.n_symbols() != vocab.len() {
            return Err(NetworkError::Shape(format!(
                "embedding table has {} symbols, vocabulary has {}",
                params.emb.n_symbols(),
                vocab.len()
            )));
        }
        Ok(Self { hyper, vocab, params })
    }

    /// Forward pass, computing bag-of-words features when the model uses them.
    pub fn forward(&self, tree: &AnnotatedAst) -> Result<ForwardTrace, NetworkError> {
        let bow = (self.hyper.bow_dim > 0).then(|| baselines::bow_features(tree.ast(), self.vocab.len_with_unk()));
        forward(tree, &self.params, self.hyper.k, bow.as_ref())
    }

    pub fn to_json(&self) -> String {
        checkpoint::encode(MODEL_FORMAT, MODEL_VERSION, self)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let model: Self = checkpoint::decode(MODEL_FORMAT, MODEL_VERSION, text)?;
        model
            .params
            .check_shapes(&model.hyper)
            .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        if model.params.emb.n_symbols() != model.vocab.len() {
            return Err(CheckpointError::Invalid("embedding rows do not match vocabulary".into()));
        }
        if !model.params.is_finite() {
            return Err(CheckpointError::Invalid("non-finite parameters".into()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{annotate, decl_example_tree, Ast, RawTree, UnknownSymbols};

    fn tree_of(raw: &RawTree, vocab: &mut SymbolVocab) -> AnnotatedAst {
        annotate(Ast::from_raw(raw, vocab, UnknownSymbols::Extend).unwrap())
    }

    fn hyper(n_f: usize, n_c: usize, n_h: usize, n_classes: usize) -> Hyper {
        Hyper { n_f, n_c, n_h, n_classes, k: DEFAULT_POOL_K, bow_dim: 0 }
    }

    fn random_params(h: &Hyper, n_symbols: usize, seed: u64) -> TbcnnParams {
        let mut rng = SeededRng::new(seed);
        let mut p = TbcnnParams::init(h, n_symbols, None, 0.5, 1.0, &mut rng).unwrap();
        for t in p.tensors_mut() {
            for v in t.data.iter_mut() {
                *v += rng.uniform_range(-0.3, 0.3);
            }
        }
        p
    }

    #[test]
    fn eta_endpoints() {
        assert_eq!(conv_coefficients(WindowLevel::Top), (1.0, 0.0, 0.0));
        let b = |p, n| conv_coefficients(WindowLevel::Bottom { position: p, siblings: n });
        assert_eq!(b(1, 3), (0.0, 1.0, 0.0));
        assert_eq!(b(2, 3), (0.0, 0.5, 0.5));
        assert_eq!(b(3, 3), (0.0, 0.0, 1.0));
        assert_eq!(b(1, 1), (0.0, 0.5, 0.5));
        for n in 1..30 {
            for p in 1..=n {
                let (t, l, r) = b(p, n);
                assert!((t + l + r - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(conv_coefficients_top_down(WindowLevel::Top).0, 0.0);
        assert_eq!(conv_coefficients_top_down(WindowLevel::Bottom { position: 2, siblings: 3 }), (1.0, 0.0, 0.0));
    }

    #[test]
    fn combination_layer_examples() {
        let mut vocab = SymbolVocab::new();
        let tree = tree_of(&decl_example_tree(), &mut vocab);
        let h = hyper(4, 3, 2, 2);
        let mut p = random_params(&h, vocab.len(), 1);

        p.w_comb1 = DenseMatrix::identity(4);
        p.w_comb2 = DenseMatrix::zeros(4, 4);
        let (xs, coded) = combined_node_vectors(&tree, &p).unwrap();
        for i in 0..tree.len() {
            assert_eq!(&xs[i][..], p.emb.vector(tree.ast().symbol(i)));
            assert_eq!(coded[i].is_some(), !tree.ast().is_leaf(i));
        }

        p.w_comb1 = DenseMatrix::zeros(4, 4);
        p.w_comb2 = DenseMatrix::identity(4);
        let (xs, coded) = combined_node_vectors(&tree, &p).unwrap();
        for i in 0..tree.len() {
            if let Some(u) = &coded[i] {
                assert_eq!(&xs[i], u);
                assert!(u.iter().all(|v| v.abs() < 1.0));
            } else {
                assert_eq!(&xs[i][..], p.emb.vector(tree.ast().symbol(i)));
            }
        }
    }

    #[test]
    fn convolution_examples() {
        let mut vocab = SymbolVocab::new();
        let leaf = tree_of(&RawTree::leaf("ID"), &mut vocab);
        let h = hyper(3, 3, 2, 2);
        let mut p = TbcnnParams::zeros(&h, vocab.len());
        p.w_conv_t = DenseMatrix::identity(3);
        let y = tree_convolve(&[DenseVector::zeros(3)], &leaf, &p).unwrap();
        assert_eq!(y[0].to_vec(), vec![0.0; 3]);

        let x = DenseVector::from(vec![1e-4, -2e-4, 3e-4]);
        let y = tree_convolve(&[x.clone()], &leaf, &p).unwrap();
        for (a, b) in y[0].iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn convolution_matches_materialized_window_weights() {
        let mut vocab = SymbolVocab::new();
        let tree = tree_of(&RawTree::node("P", vec![RawTree::leaf("A"), RawTree::leaf("B")]), &mut vocab);
        let h = hyper(3, 2, 2, 2);
        let p = random_params(&h, vocab.len(), 8);
        let mut rng = SeededRng::new(3);
        let xs: Vec<DenseVector> = (0..3).map(|_| DenseVector::random_uniform(3, 1.0, &mut rng)).collect();
        let y = tree_convolve(&xs, &tree, &p).unwrap();

        // Root window: top node with η=(1,0,0); children at (0,1,0) and (0,0,1).
        let etas = [(0usize, (1.0, 0.0, 0.0)), (1, (0.0, 1.0, 0.0)), (2, (0.0, 0.0, 1.0))];
        let mut z = p.b_conv.to_vec();
        for (node, (et, el, er)) in etas {
            for r in 0..2 {
                for c in 0..3 {
                    let w = et * p.w_conv_t.get(r, c) + el * p.w_conv_l.get(r, c) + er * p.w_conv_r.get(r, c);
                    z[r] += w * xs[node][c];
                }
            }
        }
        for r in 0..2 {
            assert!((y[0][r] - z[r].tanh()).abs() < 1e-14);
        }
        assert_eq!(y.len(), tree.len());
    }

    #[test]
    fn pooling_regions_single_node_and_decl_example() {
        let mut vocab = SymbolVocab::new();
        let single = tree_of(&RawTree::leaf("ID"), &mut vocab);
        assert_eq!(assign_pool_regions(&single, 0.6).regions, vec![Region::LowerLeft]);

        let tree = tree_of(&decl_example_tree(), &mut vocab);
        let a = assign_pool_regions(&tree, 0.6);
        let name = |i: usize| vocab.symbol(tree.ast().symbol(i)).unwrap().to_string();
        let names = |r| a.members(r).map(name).collect::<Vec<_>>();
        assert_eq!(names(Region::Top), vec!["Decl"]);
        assert_eq!(names(Region::LowerLeft), vec!["TypeDecl", "IdentifierType", "ID"]);
        assert_eq!(names(Region::LowerRight), vec!["BinaryOp", "Constant"]);
    }

    #[test]
    fn pooling_regions_perfect_binary_tree() {
        fn perfect(depth: usize) -> RawTree {
            if depth == 1 {
                RawTree::leaf("L")
            } else {
                RawTree::node("N", vec![perfect(depth - 1), perfect(depth - 1)])
            }
        }
        let mut vocab = SymbolVocab::new();
        let tree = tree_of(&perfect(4), &mut vocab);
        let a = assign_pool_regions(&tree, 0.6);
        for i in 0..tree.len() {
            let expected = if tree.depth(i) <= 2 {
                Region::Top
            } else if tree.leaf_span(i).1 <= tree.total_leaves() / 2 {
                Region::LowerLeft
            } else {
                Region::LowerRight
            };
            assert_eq!(a.regions[i], expected, "node {i}");
        }
    }

    #[test]
    fn pooling_examples() {
        let conv: Vec<DenseVector> = vec![vec![1.0, -2.0].into(), vec![0.5, 3.0].into(), vec![-1.0, 0.0].into()];
        let one_each = PoolAssignment { regions: vec![Region::Top, Region::LowerLeft, Region::LowerRight] };
        let p = pool_max(&conv, &one_each);
        for r in 0..3 {
            assert_eq!(p.vectors[r], conv[r]);
            assert_eq!(p.argmax[r], vec![Some(r), Some(r)]);
        }
        let no_right = PoolAssignment { regions: vec![Region::Top, Region::LowerLeft, Region::LowerLeft] };
        let p = pool_max(&conv, &no_right);
        assert_eq!(p.vectors[2].to_vec(), vec![0.0, 0.0]);
        assert_eq!(p.argmax[2], vec![None, None]);
        assert_eq!(p.vectors[1].to_vec(), vec![0.5, 3.0]);

        let ties: Vec<DenseVector> = vec![vec![1.0].into(), vec![1.0].into()];
        let all_top = PoolAssignment { regions: vec![Region::Top, Region::Top] };
        assert_eq!(pool_max(&ties, &all_top).argmax[0], vec![Some(0)]);
    }

    #[test]
    fn zero_parameters_give_uniform_output() {
        let mut vocab = SymbolVocab::new();
        let tree = tree_of(&decl_example_tree(), &mut vocab);
        let h = hyper(4, 4, 4, 4);
        let p = TbcnnParams::zeros(&h, vocab.len());
        let t = forward(&tree, &p, 0.6, None).unwrap();
        assert_eq!(t.probabilities.to_vec(), vec![0.25; 4]);
        assert!((t.loss(2) - 4f64.ln()).abs() < 1e-15);
        assert!((t.loss(2) - 1.386).abs() < 1e-3);
    }

    #[test]
    fn order_sensitivity() {
        let mut vocab = SymbolVocab::new();
        let a = RawTree::node("For", vec![RawTree::node("If", vec![RawTree::leaf("ID")]), RawTree::leaf("Constant")]);
        let b = RawTree::node("For", vec![RawTree::leaf("Constant"), RawTree::node("If", vec![RawTree::leaf("ID")])]);
        let ta = tree_of(&a, &mut vocab);
        let tb = tree_of(&b, &mut vocab);
        let h = hyper(4, 4, 4, 3);
        let p = random_params(&h, vocab.len(), 5);
        let pa = forward(&ta, &p, 0.6, None).unwrap().probabilities;
        let pb = forward(&tb, &p, 0.6, None).unwrap().probabilities;
        assert!(pa.iter().zip(pb.iter()).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn backward_is_pure_and_checks_inputs() {
        let mut vocab = SymbolVocab::new();
        let tree = tree_of(&decl_example_tree(), &mut vocab);
        let h = hyper(4, 4, 4, 3);
        let p = random_params(&h, vocab.len(), 2);
        let t = forward(&tree, &p, 0.6, None).unwrap();
        assert_eq!(backward(&tree, &t, 1, &p).unwrap(), backward(&tree, &t, 1, &p).unwrap());
        assert_eq!(
            backward(&tree, &t, 3, &p),
            Err(NetworkError::LabelOutOfRange { label: 3, n_classes: 3 })
        );
        let other = tree_of(&RawTree::leaf("ID"), &mut vocab);
        assert_eq!(backward(&other, &t, 0, &p), Err(NetworkError::StaleTrace));
    }

    #[test]
    fn non_argmax_windows_get_no_conv_gradient() {
        // Only one node per region and width-1 features: every node is an argmax.
        // Force node outputs so that a leaf never wins, then its top-term
        // contribution to w_conv_t must vanish.
        let mut vocab = SymbolVocab::new();
        let tree = tree_of(&RawTree::node("P", vec![RawTree::leaf("A"), RawTree::leaf("A"), RawTree::leaf("A")]), &mut vocab);
        let h = Hyper { n_f: 1, n_c: 1, n_h: 1, n_classes: 2, k: 10.0, bow_dim: 0 };
        let mut p = TbcnnParams::zeros(&h, vocab.len());
        p.emb.vector_mut(vocab.id("P").unwrap())[0] = 2.0;
        p.emb.vector_mut(vocab.id("A").unwrap())[0] = -1.0;
        p.w_comb1 = DenseMatrix::identity(1);
        p.w_conv_t = DenseMatrix::identity(1);
        p.w_hid = DenseMatrix::from_vec(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        p.w_out = DenseMatrix::from_vec(2, 1, vec![1.0, -1.0]).unwrap();
        let t = forward(&tree, &p, h.k, None).unwrap();
        // k = 10 puts everything in TOP; root (x = 2) beats the leaves (x = -1).
        assert_eq!(t.pooled.argmax[0], vec![Some(0)]);
        let g = backward(&tree, &t, 0, &p).unwrap();
        // d w_conv_t = dz_root * x_root only.
        let dz_root = g.b_conv[0];
        assert!((g.w_conv_t.get(0, 0) - dz_root * 2.0).abs() < 1e-15);
        // The leaves' embedding gradient comes only through the root's window and coding.
        assert_eq!(g.emb.vector(vocab.id("A").unwrap())[0], 0.0);
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let mut vocab = SymbolVocab::new();
        let tree = tree_of(&decl_example_tree(), &mut vocab);
        let h = hyper(3, 3, 3, 4);
        let p = random_params(&h, vocab.len(), 4);
        let m = TbcnnModel::new(h, vocab, p).unwrap();
        let text = m.to_json();
        let back = TbcnnModel::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.forward(&tree).unwrap(), m.forward(&tree).unwrap());
        assert!(TbcnnModel::from_json(&text.replacen("\"version\":1", "\"version\":2", 1)).is_err());
        assert!(TbcnnModel::from_json(&text[..text.len() / 2]).is_err());
    }
}
