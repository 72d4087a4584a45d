//! Dataset splitting, supervised training, evaluation and learning curves.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ast::{annotate, AnnotatedAst, Ast, AstError, DatasetRecord, SymbolVocab, UnknownSymbols};
use crate::baselines::{bow_dim, bow_features, BowVector};
use crate::network::{accumulate_gradients, forward, Hyper, NetworkError, TbcnnModel, TbcnnParams, DEFAULT_POOL_K};
use crate::numerics::{sgd_momentum_step, MomentumState, ParamSet, SeededRng, SgdConfig};
use crate::pretrain::PretrainParams;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset needs at least 5 samples, got {0}")]
    TooFewSamples(usize),
    #[error("empty index list")]
    EmptyIndices,
    #[error("sample index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("pretrained tables required for pretrained initialization")]
    MissingPretrained,
    #[error("training diverged at epoch {epoch}, sample {sample}: loss {loss}")]
    Diverged { epoch: usize, sample: usize, loss: f64 },
    #[error("dataset has {dataset} classes, model has {model}")]
    ClassMismatch { dataset: usize, model: usize },
    #[error(transparent)]
    Ast(#[from] AstError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Annotated trees with labels, plus their bag-of-words counts.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub trees: Vec<AnnotatedAst>,
    pub labels: Vec<usize>,
    pub bows: Vec<BowVector>,
    pub n_classes: usize,
    pub provenance: String,
}

impl LabeledDataset {
    /// Converts dataset records against `vocab`. `n_classes` defaults to
    /// one more than the largest label.
    pub fn from_records(
        records: &[DatasetRecord],
        vocab: &mut SymbolVocab,
        policy: UnknownSymbols,
        n_classes: Option<usize>,
        provenance: impl Into<String>,
    ) -> Result<Self, TrainError> {
        if records.is_empty() {
            return Err(AstError::EmptyCorpus.into());
        }
        let inferred = records.iter().map(|r| r.label).max().unwrap_or(0) + 1;
        let n_classes = n_classes.unwrap_or(inferred);
        if inferred > n_classes {
            return Err(TrainError::ClassMismatch { dataset: inferred, model: n_classes });
        }
        let mut trees = Vec::with_capacity(records.len());
        for r in records {
            trees.push(annotate(Ast::from_raw(&r.ast, vocab, policy)?));
        }
        let dim = bow_dim(vocab);
        let bows = trees.iter().map(|t| bow_features(t.ast(), dim)).collect();
        Ok(Self {
            trees,
            labels: records.iter().map(|r| r.label).collect(),
            bows,
            n_classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub cv: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    pub fn part(&self, which: SplitPart) -> &[usize] {
        match which {
            SplitPart::Train => &self.train,
            SplitPart::Cv => &self.cv,
            SplitPart::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Cv,
    Test,
}

impl FromStr for SplitPart {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "cv" => Ok(Self::Cv),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split `{other}` (expected train, cv or test)")),
        }
    }
}

/// 60/20/20 split. Samples are ordered class by class, shuffled within each
/// class, and dealt round-robin in blocks of five (three train, one CV, one
/// test), so every class is split in the same proportions. If some class has
/// fewer than 3 samples the whole dataset is shuffled instead.
pub fn split_dataset(labels: &[usize], seed: u64) -> Result<SplitSpec, TrainError> {
    if labels.len() < 5 {
        return Err(TrainError::TooFewSamples(labels.len()));
    }
    let mut rng = SeededRng::new(seed);
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let stratified = by_class.iter().all(|c| c.is_empty() || c.len() >= 3);
    let order: Vec<usize> = if stratified {
        by_class
            .into_iter()
            .flat_map(|mut c| {
                rng.shuffle(&mut c);
                c
            })
            .collect()
    } else {
        log::warn!("a class has fewer than 3 samples; falling back to an unstratified split");
        let mut all: Vec<usize> = (0..labels.len()).collect();
        rng.shuffle(&mut all);
        all
    };
    let mut split = SplitSpec { train: Vec::new(), cv: Vec::new(), test: Vec::new(), seed, stratified };
    for (pos, i) in order.into_iter().enumerate() {
        match pos % 5 {
            0..=2 => split.train.push(i),
            3 => split.cv.push(i),
            _ => split.test.push(i),
        }
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Random,
    Pretrained,
}

impl FromStr for InitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(Self::Random),
            "pretrained" => Ok(Self::Pretrained),
            other => Err(format!("unknown init mode `{other}` (expected random or pretrained)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_f: usize,
    pub n_c: usize,
    pub n_h: usize,
    pub lr: f64,
    pub momentum: f64,
    pub l2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub init: InitMode,
    pub bow_combine: bool,
    /// Stop after this many epochs without a CV improvement; 0 disables.
    pub patience: usize,
    pub k: f64,
    /// Half-width of the uniform initialization of non-pretrained tensors.
    pub init_scale: f64,
    /// Diagonal value of the initial combination matrices.
    pub comb_diag: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_f: 30,
            n_c: 30,
            n_h: 30,
            lr: 0.03,
            momentum: 0.0,
            l2: 0.0,
            epochs: 40,
            seed: 0,
            init: InitMode::Random,
            bow_combine: false,
            patience: 0,
            k: DEFAULT_POOL_K,
            init_scale: 0.05,
            comb_diag: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.n_f == 0 || self.n_c == 0 || self.n_h == 0 {
            return Err(TrainError::Config("layer sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.l2 >= 0.0) || !(self.init_scale >= 0.0) || !self.k.is_finite() || !self.comb_diag.is_finite() {
            return Err(TrainError::Config("l2, init_scale, k and comb_diag must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| TrainError::Config(format!("line {}: {msg}", n + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            fn num<T: FromStr>(v: &str, bad: impl Fn(&str) -> TrainError) -> Result<T, TrainError> {
                v.parse().map_err(|_| bad("invalid number"))
            }
            match key {
                "n_f" => c.n_f = num(value, bad)?,
                "n_c" => c.n_c = num(value, bad)?,
                "n_h" => c.n_h = num(value, bad)?,
                "lr" => c.lr = num(value, bad)?,
                "momentum" => c.momentum = num(value, bad)?,
                "l2" => c.l2 = num(value, bad)?,
                "epochs" => c.epochs = num(value, bad)?,
                "seed" => c.seed = num(value, bad)?,
                "patience" => c.patience = num(value, bad)?,
                "k" => c.k = num(value, bad)?,
                "init_scale" => c.init_scale = num(value, bad)?,
                "comb_diag" => c.comb_diag = num(value, bad)?,
                "init" => c.init = value.parse().map_err(|e: String| bad(&e))?,
                "bow_combine" => c.bow_combine = value.parse().map_err(|_| bad("expected true or false"))?,
                other => return Err(bad(&format!("unknown key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        format!(
            "n_f = {}\nn_c = {}\nn_h = {}\nlr = {}\nmomentum = {}\nl2 = {}\nepochs = {}\nseed = {}\ninit = {}\nbow_combine = {}\npatience = {}\nk = {}\ninit_scale = {}\ncomb_diag = {}\n",
            self.n_f,
            self.n_c,
            self.n_h,
            self.lr,
            self.momentum,
            self.l2,
            self.epochs,
            self.seed,
            match self.init {
                InitMode::Random => "random",
                InitMode::Pretrained => "pretrained",
            },
            self.bow_combine,
            self.patience,
            self.k,
            self.init_scale,
            self.comb_diag
        )
    }

    pub fn hyper(&self, n_classes: usize, vocab: &SymbolVocab) -> Hyper {
        Hyper {
            n_f: self.n_f,
            n_c: self.n_c,
            n_h: self.n_h,
            n_classes,
            k: self.k,
            bow_dim: if self.bow_combine { bow_dim(vocab) } else { 0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_cost: f64,
    pub cv_cost: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: TbcnnModel,
    pub curve: Vec<CurvePoint>,
    /// Epoch whose parameters were kept; 0 means the initialization.
    pub best_epoch: usize,
}

impl TrainOutput {
    pub fn best_cv_cost(&self) -> Option<f64> {
        self.curve.iter().find(|p| p.epoch == self.best_epoch).map(|p| p.cv_cost)
    }
}

/// Tab-separated `epoch, train_cost, cv_cost` with a header line.
pub fn curve_to_tsv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("epoch\ttrain_cost\tcv_cost\n");
    for p in curve {
        let _ = writeln!(s, "{}\t{}\t{}", p.epoch, p.train_cost, p.cv_cost);
    }
    s
}

pub fn parse_curve_tsv(text: &str) -> Result<Vec<CurvePoint>, String> {
    let mut lines = text.lines();
    if lines.next() != Some("epoch\ttrain_cost\tcv_cost") {
        return Err("missing curve header".into());
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 3 {
                return Err(format!("bad curve line `{l}`"));
            }
            Ok(CurvePoint {
                epoch: f[0].parse().map_err(|_| format!("bad epoch in `{l}`"))?,
                train_cost: f[1].parse().map_err(|_| format!("bad cost in `{l}`"))?,
                cv_cost: f[2].parse().map_err(|_| format!("bad cost in `{l}`"))?,
            })
        })
        .collect()
}

fn check_indices(ds: &LabeledDataset, idx: &[usize]) -> Result<(), TrainError> {
    if idx.is_empty() {
        return Err(TrainError::EmptyIndices);
    }
    match idx.iter().find(|&&i| i >= ds.len()) {
        Some(&i) => Err(TrainError::IndexOutOfRange(i)),
        None => Ok(()),
    }
}

fn bow_for<'a>(ds: &'a LabeledDataset, i: usize, params: &TbcnnParams) -> Option<&'a BowVector> {
    (params.bow_dim() > 0).then(|| &ds.bows[i])
}

/// Mean cross-entropy over `idx`, summed in index order.
pub fn mean_cost(params: &TbcnnParams, k: f64, ds: &LabeledDataset, idx: &[usize]) -> Result<f64, TrainError> {
    check_indices(ds, idx)?;
    let losses: Vec<f64> = idx
        .par_iter()
        .map(|&i| forward(&ds.trees[i], params, k, bow_for(ds, i, params)).map(|t| t.loss(ds.labels[i])))
        .collect::<Result<_, _>>()?;
    Ok(losses.iter().sum::<f64>() / idx.len() as f64)
}

/// Supervised training with per-sample SGD. Returns the parameters of the
/// epoch with the lowest CV cost.
pub fn train(
    ds: &LabeledDataset,
    vocab: &SymbolVocab,
    split: &SplitSpec,
    config: &TrainConfig,
    pretrained: Option<&PretrainParams>,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    check_indices(ds, &split.train)?;
    check_indices(ds, &split.cv)?;
    let pretrained = match (config.init, pretrained) {
        (InitMode::Pretrained, None) => return Err(TrainError::MissingPretrained),
        (InitMode::Pretrained, p) => p,
        (InitMode::Random, _) => None,
    };
    let hyper = config.hyper(ds.n_classes, vocab);
    let mut rng = SeededRng::new(config.seed);
    let mut params =
        TbcnnParams::init(&hyper, vocab.len(), pretrained, config.init_scale, config.comb_diag, &mut rng)?;
    let sgd = SgdConfig { lr: config.lr, momentum: config.momentum, l2: config.l2 };
    let mut state = MomentumState::zeros_like(&params);
    let mut grads = params.zeros_like();
    let mut order = split.train.clone();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut best = (0usize, f64::INFINITY, params.clone());

    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut skipped = 0usize;
        for &i in &order {
            let trace = forward(&ds.trees[i], &params, hyper.k, bow_for(ds, i, &params))?;
            let loss = trace.loss(ds.labels[i]);
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, sample: i, loss });
            }
            grads.zero();
            accumulate_gradients(&ds.trees[i], &trace, ds.labels[i], &params, &mut grads)?;
            if sgd_momentum_step(&mut params, &grads, &mut state, sgd).is_err() {
                skipped += 1;
            }
        }
        if skipped > 0 {
            log::warn!("epoch {epoch}: skipped {skipped} steps with non-finite gradients");
        }
        let train_cost = mean_cost(&params, hyper.k, ds, &split.train)?;
        let cv_cost = mean_cost(&params, hyper.k, ds, &split.cv)?;
        if !train_cost.is_finite() || !cv_cost.is_finite() {
            return Err(TrainError::Diverged { epoch, sample: usize::MAX, loss: train_cost.max(cv_cost) });
        }
        log::info!("epoch {epoch}: train cost {train_cost:.6}, cv cost {cv_cost:.6}");
        curve.push(CurvePoint { epoch, train_cost, cv_cost });
        if cv_cost < best.1 {
            best = (epoch, cv_cost, params.clone());
        } else if config.patience > 0 && epoch - best.0 >= config.patience {
            log::info!("no CV improvement for {} epochs; stopping", config.patience);
            break;
        }
    }
    let (best_epoch, _, best_params) = best;
    let model = TbcnnModel::new(hyper, vocab.clone(), best_params)?;
    Ok(TrainOutput { model, curve, best_epoch })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    /// Percentage of misclassified samples.
    pub error_rate: f64,
    pub mean_cross_entropy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn accuracy(&self) -> f64 {
        1.0 - self.error_rate / 100.0
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "samples: {}\nerror rate: {:.2}%\nmean cross-entropy: {:.6}\nconfusion (rows = true class):\n",
            self.n, self.error_rate, self.mean_cross_entropy
        );
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "  {}", cells.join("\t"));
        }
        s
    }
}

/// Argmax predictions over `idx`.
pub fn evaluate(model: &TbcnnModel, ds: &LabeledDataset, idx: &[usize]) -> Result<Metrics, TrainError> {
    check_indices(ds, idx)?;
    let n_classes = model.hyper.n_classes;
    if ds.n_classes > n_classes {
        return Err(TrainError::ClassMismatch { dataset: ds.n_classes, model: n_classes });
    }
    let params = &model.params;
    let results: Vec<(usize, f64)> = idx
        .par_iter()
        .map(|&i| {
            forward(&ds.trees[i], params, model.hyper.k, bow_for(ds, i, params))
                .map(|t| (t.predicted(), t.loss(ds.labels[i])))
        })
        .collect::<Result<_, _>>()?;
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    let mut wrong = 0usize;
    let mut total_loss = 0.0;
    for (&i, &(pred, loss)) in idx.iter().zip(&results) {
        confusion[ds.labels[i]][pred] += 1;
        wrong += usize::from(pred != ds.labels[i]);
        total_loss += loss;
    }
    Ok(Metrics {
        n: idx.len(),
        error_rate: 100.0 * wrong as f64 / idx.len() as f64,
        mean_cross_entropy: total_loss / idx.len() as f64,
        confusion,
    })
}
