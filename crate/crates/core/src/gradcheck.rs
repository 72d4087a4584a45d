//! Finite-difference verification of the analytic gradients of both
//! objectives: the network's cross-entropy and the pretraining hinge.

use serde::Serialize;

use crate::ast::{annotate, AnnotatedAst, Ast, RawTree, SymbolVocab, UnknownSymbols};
use crate::baselines::{bow_dim, bow_features};
use crate::network::{accumulate_gradients, forward, Hyper, TbcnnParams, DEFAULT_POOL_K};
use crate::numerics::{ParamSet, SeededRng};
use crate::pretrain::{
    hinge_gradient, hinge_loss, negative_sample, CodingParams, EmbeddingTable, PretrainParams, PretrainSample,
};

const SYMBOLS: [&str; 6] = ["For", "If", "BinaryOp", "ID", "Constant", "Decl"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// N_f = N_c = N_h.
    pub dims: usize,
    pub n_seeds: usize,
    pub n_classes: usize,
    pub coords_per_tensor: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that coordinates
    /// whose true gradient is zero compare on an absolute scale.
    pub denominator_floor: f64,
    pub param_scale: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dims: 4,
            n_seeds: 5,
            n_classes: 3,
            coords_per_tensor: 20,
            min_nodes: 8,
            max_nodes: 15,
            step: 1e-5,
            tolerance: 1e-4,
            denominator_floor: 1e-6,
            param_scale: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub objective: &'static str,
    pub seed: u64,
    pub tensor: &'static str,
    pub coords: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn summary(&self) -> String {
        format!(
            "{}, max rel err {:.3e} (tolerance {:.0e}, {} tensor checks)",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tolerance,
            self.checks.len()
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Random ordered tree with exactly `n` nodes over a small alphabet.
pub fn random_tree(n: usize, rng: &mut SeededRng) -> RawTree {
    assert!(n >= 1);
    // Attach node i to a uniformly chosen earlier node, then build top-down.
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 1..n {
        let p = rng.below(i);
        children[p].push(i);
    }
    let labels: Vec<&str> = (0..n).map(|_| SYMBOLS[rng.below(SYMBOLS.len())]).collect();
    fn build(i: usize, children: &[Vec<usize>], labels: &[&str]) -> RawTree {
        RawTree::node(labels[i], children[i].iter().map(|&c| build(c, children, labels)).collect())
    }
    build(0, &children, &labels)
}

fn coordinates(len: usize, allowed: Option<&[usize]>, want: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut pool: Vec<usize> = match allowed {
        Some(a) => a.to_vec(),
        None => (0..len).collect(),
    };
    if pool.len() > want {
        rng.shuffle(&mut pool);
        pool.truncate(want);
        pool.sort_unstable();
    }
    pool
}

/// Compares `analytic` with central differences of `loss` at sampled
/// coordinates of every tensor. `allowed` restricts the embedding tensor
/// to the given flat indices.
fn check_tensors<P, F>(
    params: &P,
    analytic: &P,
    loss: F,
    embedding_coords: &[usize],
    objective: &'static str,
    seed: u64,
    cfg: &GradcheckConfig,
    rng: &mut SeededRng,
) -> Vec<TensorCheck>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> f64,
{
    let views = analytic.tensors();
    let mut out = Vec::with_capacity(views.len());
    for (t, view) in views.iter().enumerate() {
        let allowed = (view.name == "embeddings").then_some(embedding_coords);
        let coords = coordinates(view.data.len(), allowed, cfg.coords_per_tensor, rng);
        let mut worst: f64 = 0.0;
        let mut probe = params.clone();
        for &c in &coords {
            let original = probe.tensors()[t].data[c];
            probe.tensors_mut()[t].data[c] = original + cfg.step;
            let up = loss(&probe);
            probe.tensors_mut()[t].data[c] = original - cfg.step;
            let down = loss(&probe);
            probe.tensors_mut()[t].data[c] = original;
            let numeric = (up - down) / (2.0 * cfg.step);
            let err = relative_error(view.data[c], numeric, cfg.denominator_floor);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        out.push(TensorCheck { objective, seed, tensor: view.name, coords: coords.len(), max_rel_err: worst });
    }
    out
}

fn perturb_all<P: ParamSet>(p: &mut P, scale: f64, rng: &mut SeededRng) {
    for t in p.tensors_mut() {
        for v in t.data.iter_mut() {
            *v = rng.uniform_range(-scale, scale);
        }
    }
}

fn used_embedding_coords(tree: &AnnotatedAst, dim: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tree.ast().nodes().iter().map(|n| n.symbol).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.iter().flat_map(|&s| (s * dim)..(s * dim + dim)).collect()
}

fn network_case(seed: u64, with_bow: bool, cfg: &GradcheckConfig) -> Vec<TensorCheck> {
    let mut rng = SeededRng::new(seed);
    let size = rng.between(cfg.min_nodes, cfg.max_nodes);
    let mut vocab = SymbolVocab::from_symbols(SYMBOLS).expect("distinct symbols");
    let raw = random_tree(size, &mut rng);
    let tree = annotate(Ast::from_raw(&raw, &mut vocab, UnknownSymbols::Reject).expect("known symbols"));
    let bow = with_bow.then(|| bow_features(tree.ast(), bow_dim(&vocab)));
    let hyper = Hyper {
        n_f: cfg.dims,
        n_c: cfg.dims,
        n_h: cfg.dims,
        n_classes: cfg.n_classes,
        k: DEFAULT_POOL_K,
        bow_dim: bow.as_ref().map_or(0, |b| b.dim()),
    };
    let mut params = TbcnnParams::zeros(&hyper, vocab.len());
    perturb_all(&mut params, cfg.param_scale, &mut rng);
    let label = rng.below(cfg.n_classes);

    let loss = |p: &TbcnnParams| forward(&tree, p, hyper.k, bow.as_ref()).expect("valid forward").loss(label);
    let trace = forward(&tree, &params, hyper.k, bow.as_ref()).expect("valid forward");
    let mut grads = params.zeros_like();
    accumulate_gradients(&tree, &trace, label, &params, &mut grads).expect("valid trace");
    let emb_coords = used_embedding_coords(&tree, cfg.dims);
    let name = if with_bow { "tbcnn+bow" } else { "tbcnn" };
    check_tensors(&params, &grads, loss, &emb_coords, name, seed, cfg, &mut rng)
}

fn pretrain_case(seed: u64, cfg: &GradcheckConfig) -> Vec<TensorCheck> {
    let mut rng = SeededRng::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    let size = rng.between(cfg.min_nodes, cfg.max_nodes);
    let mut vocab = SymbolVocab::from_symbols(SYMBOLS).expect("distinct symbols");
    let raw = random_tree(size, &mut rng);
    let tree = annotate(Ast::from_raw(&raw, &mut vocab, UnknownSymbols::Reject).expect("known symbols"));
    let samples = PretrainSample::from_tree(&tree);
    let pos = &samples[rng.below(samples.len())];
    let neg = negative_sample(pos, vocab.len(), &mut rng).expect("vocabulary has several symbols");
    let mut params = PretrainParams {
        emb: EmbeddingTable::zeros(vocab.len(), cfg.dims),
        coding: CodingParams::zeros(cfg.dims),
    };
    perturb_all(&mut params, cfg.param_scale, &mut rng);
    // A large margin keeps the hinge active, away from its kink.
    let margin = 100.0;
    let loss = |p: &PretrainParams| hinge_loss(pos, &neg, p, margin);
    let (_, grads) = hinge_gradient(pos, &neg, &params, margin);
    let mut ids: Vec<usize> = std::iter::once(pos.parent)
        .chain(pos.children.iter().copied())
        .chain(std::iter::once(neg.parent))
        .chain(neg.children.iter().copied())
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let emb_coords: Vec<usize> = ids.iter().flat_map(|&s| (s * cfg.dims)..(s * cfg.dims + cfg.dims)).collect();
    check_tensors(&params, &grads, loss, &emb_coords, "pretrain", seed, cfg, &mut rng)
}

/// Runs every objective over `n_seeds` derived seeds. Odd-numbered seeds
/// also exercise the bag-of-words input of the hidden layer.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> GradcheckReport {
    let mut checks = Vec::new();
    for s in 0..cfg.n_seeds as u64 {
        let seed = cfg.seed.wrapping_add(s);
        checks.extend(network_case(seed, s % 2 == 1, cfg));
        checks.extend(pretrain_case(seed, cfg));
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    GradcheckReport { passed: max_rel_err < cfg.tolerance, max_rel_err, tolerance: cfg.tolerance, checks }
}
