//! Bag-of-words counting features, linear classifiers over them, and the
//! feature concatenation used when the network takes counts as an extra input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ast::{Ast, SymbolVocab};
use crate::checkpoint::{self, CheckpointError};
use crate::numerics::{softmax, DenseMatrix, DenseVector, SeededRng};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("no training samples")]
    Empty,
    #[error("feature dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Occurrence count per symbol id. The last slot counts `<UNK>` nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BowVector(pub Vec<u32>);

impl BowVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().map(|&c| c as u64).sum()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&c| c as f64).collect()
    }

    /// Elementwise `ln(1 + count)`.
    pub fn log1p(&self) -> Vec<f64> {
        self.0.iter().map(|&c| (c as f64).ln_1p()).collect()
    }
}

/// Counts of each symbol in `ast`, of width `dim` (vocabulary size plus
/// the `<UNK>` slot). Ids at or beyond `dim − 1` land in the last slot.
pub fn bow_features(ast: &Ast, dim: usize) -> BowVector {
    assert!(dim > 0, "bag-of-words width must be positive");
    let mut counts = vec![0u32; dim];
    for node in ast.nodes() {
        counts[node.symbol.min(dim - 1)] += 1;
    }
    BowVector(counts)
}

pub fn bow_dim(vocab: &SymbolVocab) -> usize {
    vocab.len_with_unk()
}

/// Pooled features followed by `ln(1 + count)` of each count.
pub fn combine_tbcnn_bow(pooled: &[f64], bow: &BowVector) -> Vec<f64> {
    let mut out = Vec::with_capacity(pooled.len() + bow.dim());
    out.extend_from_slice(pooled);
    out.extend(bow.log1p());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Multinomial logistic regression.
    Logistic,
    /// One-vs-rest linear SVM.
    Hinge,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lr" | "logistic" => Ok(Self::Logistic),
            "svm" | "hinge" => Ok(Self::Hinge),
            other => Err(format!("unknown method `{other}` (expected lr or svm)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    pub loss: LossKind,
    pub lr: f64,
    pub l2: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self { loss: LossKind::Logistic, lr: 0.01, l2: 1e-4, epochs: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub loss: LossKind,
    pub weights: DenseMatrix,
    pub bias: DenseVector,
}

impl LinearModel {
    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let mut s = self.bias.to_vec();
        self.weights.mul_vec_add(1.0, x, &mut s);
        s
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::network::argmax(&self.scores(x))
    }

    /// Mean objective (without the ℓ2 term) over a dataset.
    pub fn mean_loss(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        let total: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, &y)| {
                let s = self.scores(x);
                match self.loss {
                    LossKind::Logistic => -softmax(&s)[y].ln(),
                    LossKind::Hinge => s
                        .iter()
                        .enumerate()
                        .map(|(c, &v)| {
                            let t = if c == y { 1.0 } else { -1.0 };
                            (1.0 - t * v).max(0.0)
                        })
                        .sum(),
                }
            })
            .sum();
        total / xs.len() as f64
    }
}

/// Per-sample SGD over shuffled samples. Weights start at zero, so the
/// result depends only on the data, the config and the seed.
pub fn train_linear(xs: &[Vec<f64>], ys: &[usize], n_classes: usize, config: &LinearConfig) -> Result<LinearModel, BaselineError> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(BaselineError::Empty);
    }
    if !(config.lr > 0.0) || !(config.l2 >= 0.0) {
        return Err(BaselineError::Config("lr must be positive and l2 non-negative".into()));
    }
    let dim = xs[0].len();
    if let Some(x) = xs.iter().find(|x| x.len() != dim) {
        return Err(BaselineError::Dimension { expected: dim, got: x.len() });
    }
    if let Some(&label) = ys.iter().find(|&&y| y >= n_classes) {
        return Err(BaselineError::Label { label, n_classes });
    }
    let mut model = LinearModel {
        loss: config.loss,
        weights: DenseMatrix::zeros(n_classes, dim),
        bias: DenseVector::zeros(n_classes),
    };
    let mut rng = SeededRng::new(config.seed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        for &i in &order {
            let (x, y) = (&xs[i], ys[i]);
            let s = model.scores(x);
            let ds: Vec<f64> = match config.loss {
                LossKind::Logistic => {
                    let mut p = softmax(&s).into_inner();
                    p[y] -= 1.0;
                    p
                }
                LossKind::Hinge => s
                    .iter()
                    .enumerate()
                    .map(|(c, &v)| {
                        let t = if c == y { 1.0 } else { -1.0 };
                        if t * v < 1.0 {
                            -t
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            };
            if config.l2 > 0.0 {
                let shrink = 1.0 - config.lr * config.l2;
                model.weights.as_mut_slice().iter_mut().for_each(|w| *w *= shrink);
            }
            model.weights.add_outer(-config.lr, &ds, x);
            for (b, g) in model.bias.iter_mut().zip(&ds) {
                *b -= config.lr * g;
            }
        }
        if !model.weights.is_finite() || !model.bias.iter().all(|b| b.is_finite()) {
            return Err(BaselineError::Diverged(epoch));
        }
    }
    Ok(model)
}

pub const BASELINE_FORMAT: &str = "tbcnn-baseline";
pub const BASELINE_VERSION: u32 = 1;

/// A trained baseline with the vocabulary its features were counted over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCheckpoint {
    pub vocab: SymbolVocab,
    pub model: LinearModel,
}

impl BaselineCheckpoint {
    pub fn to_json(&self) -> String {
        checkpoint::encode(BASELINE_FORMAT, BASELINE_VERSION, self)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let c: Self = checkpoint::decode(BASELINE_FORMAT, BASELINE_VERSION, text)?;
        let m = &c.model;
        if m.weights.rows() != m.bias.len()
            || m.weights.as_slice().len() != m.weights.rows() * m.weights.cols()
            || m.weights.cols() != bow_dim(&c.vocab)
        {
            return Err(CheckpointError::Invalid("baseline weights do not match vocabulary".into()));
        }
        if !m.weights.is_finite() || !m.bias.iter().all(|b| b.is_finite()) {
            return Err(CheckpointError::Invalid("non-finite baseline parameters".into()));
        }
        Ok(c)
    }
}
