//! Deterministic synthetic corpora of C-like ASTs. Each class is marked by
//! a small loop motif that differs between classes only in shape: which
//! loop is outer, which side the nested loop sits on, and which statement
//! it wraps. Filler statements include ordinary loops with a `Compound`
//! body, so loop kinds alone do not identify the motif.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ast::{DatasetRecord, RawTree};
use crate::numerics::SeededRng;

/// Largest supported class count (the number of distinct motif shapes).
pub const MAX_CLASSES: usize = 8;

/// Nodes in the fixed function skeleton around the statements.
const SKELETON_NODES: usize = 6;
const MOTIF_NODES: usize = 8;
pub const MIN_FEASIBLE_NODES: usize = SKELETON_NODES + MOTIF_NODES;

const HOLE: &str = "\u{0}motif";

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("need between 2 and {MAX_CLASSES} classes, got {0}")]
    Classes(usize),
    #[error("samples per class must be positive")]
    NoSamples,
    #[error("size bounds [{min}, {max}] infeasible: every tree needs at least {MIN_FEASIBLE_NODES} nodes")]
    Size { min: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Build each group of one-sample-per-class from a shared filler so the
    /// group's symbol multisets are identical.
    pub count_matched: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { n_classes: 4, per_class: 200, min_nodes: 20, max_nodes: 60, count_matched: true, seed: 0 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if !(2..=MAX_CLASSES).contains(&self.n_classes) {
            return Err(GenError::Classes(self.n_classes));
        }
        if self.per_class == 0 {
            return Err(GenError::NoSamples);
        }
        if self.min_nodes > self.max_nodes || self.max_nodes < MIN_FEASIBLE_NODES {
            return Err(GenError::Size { min: self.min_nodes, max: self.max_nodes });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenOutput {
    pub records: Vec<DatasetRecord>,
    /// Record indices built from one shared filler (count-matched mode only).
    pub groups: Vec<Vec<usize>>,
}

/// Motif for `class`: `outer(inner(body), other)` or `outer(other, inner(body))`.
pub fn motif(class: usize) -> RawTree {
    const VARIANT: [usize; MAX_CLASSES] = [0, 2, 1, 3, 4, 6, 5, 7];
    let v = VARIANT[class];
    let (outer, inner) = if v & 1 == 0 { ("For", "While") } else { ("While", "For") };
    let assign = RawTree::node("Assignment", vec![RawTree::leaf("ID"), RawTree::leaf("Constant")]);
    let binop = RawTree::node("BinaryOp", vec![RawTree::leaf("ID"), RawTree::leaf("Constant")]);
    let (body, other) = if v & 4 == 0 { (assign, binop) } else { (binop, assign) };
    let nested = RawTree::node(inner, vec![body]);
    let kids = if v & 2 == 0 { vec![nested, other] } else { vec![other, nested] };
    RawTree::node(outer, kids)
}

#[derive(Clone, Copy)]
enum Stmt {
    Expr,
    Return,
    Unary,
    BareDecl,
    InitDecl,
    SetConst,
    SetExpr,
    Call,
    If,
    ForLoop,
    WhileLoop,
}

const N_STMTS: usize = 11;

const STMTS: [Stmt; N_STMTS] = [
    Stmt::Expr,
    Stmt::Return,
    Stmt::Unary,
    Stmt::BareDecl,
    Stmt::InitDecl,
    Stmt::SetConst,
    Stmt::SetExpr,
    Stmt::Call,
    Stmt::If,
    Stmt::ForLoop,
    Stmt::WhileLoop,
];

impl Stmt {
    /// Node count, excluding the body of a compound statement.
    fn size(self) -> usize {
        match self {
            Stmt::Expr => 1,
            Stmt::Return | Stmt::Unary => 2,
            Stmt::BareDecl | Stmt::SetConst => 3,
            Stmt::InitDecl => 4,
            Stmt::SetExpr | Stmt::Call | Stmt::If | Stmt::WhileLoop => 5,
            Stmt::ForLoop => 10,
        }
    }

    fn nests(self) -> bool {
        matches!(self, Stmt::If | Stmt::ForLoop | Stmt::WhileLoop)
    }
}

fn leaf(s: &str) -> RawTree {
    RawTree::leaf(s)
}

fn node(s: &str, kids: Vec<RawTree>) -> RawTree {
    RawTree::node(s, kids)
}

fn type_decl() -> RawTree {
    node("TypeDecl", vec![leaf("IdentifierType")])
}

/// Statements totalling exactly `budget` nodes.
fn statements(budget: usize, weights: &[f64; N_STMTS], rng: &mut SeededRng, depth: usize) -> Vec<RawTree> {
    let mut out = Vec::new();
    let mut left = budget;
    while left > 0 {
        let fits: Vec<(Stmt, f64)> = STMTS
            .iter()
            .zip(weights)
            .filter(|(s, _)| s.size() <= left && !(s.nests() && depth >= 2))
            .map(|(&s, &w)| (s, w))
            .collect();
        let total: f64 = fits.iter().map(|(_, w)| w).sum();
        let mut r = rng.uniform() * total;
        let mut pick = fits[fits.len() - 1].0;
        for &(s, w) in &fits {
            if r < w {
                pick = s;
                break;
            }
            r -= w;
        }
        let t = match pick {
            Stmt::Expr => leaf("ID"),
            Stmt::Return => node("Return", vec![leaf("ID")]),
            Stmt::Unary => node("UnaryOp", vec![leaf("ID")]),
            Stmt::BareDecl => node("Decl", vec![type_decl()]),
            Stmt::InitDecl => node("Decl", vec![type_decl(), leaf("Constant")]),
            Stmt::SetConst => node("Assignment", vec![leaf("ID"), leaf("Constant")]),
            Stmt::SetExpr => node(
                "Assignment",
                vec![leaf("ID"), node("BinaryOp", vec![leaf("ID"), leaf("Constant")])],
            ),
            Stmt::Call => node("FuncCall", vec![leaf("ID"), node("ExprList", vec![leaf("ID"), leaf("Constant")])]),
            Stmt::If | Stmt::WhileLoop => {
                let inner = rng.between(0, (left - 5).min(12));
                node(
                    if matches!(pick, Stmt::If) { "If" } else { "While" },
                    vec![
                        node("BinaryOp", vec![leaf("ID"), leaf("ID")]),
                        node("Compound", statements(inner, weights, rng, depth + 1)),
                    ],
                )
            }
            Stmt::ForLoop => {
                let inner = rng.between(0, (left - 10).min(12));
                node(
                    "For",
                    vec![
                        node("Assignment", vec![leaf("ID"), leaf("Constant")]),
                        node("BinaryOp", vec![leaf("ID"), leaf("Constant")]),
                        node("UnaryOp", vec![leaf("ID")]),
                        node("Compound", statements(inner, weights, rng, depth + 1)),
                    ],
                )
            }
        };
        left -= t.node_count();
        out.push(t);
    }
    out
}

fn count_compounds(t: &RawTree) -> usize {
    usize::from(t.symbol == "Compound") + t.children.iter().map(count_compounds).sum::<usize>()
}

/// Inserts `item` into the `k`-th `Compound` (pre-order) at a position from `rng`.
fn insert_into_compound(t: &mut RawTree, k: &mut usize, item: &RawTree, rng: &mut SeededRng) -> bool {
    if t.symbol == "Compound" {
        if *k == 0 {
            let at = rng.below(t.children.len() + 1);
            t.children.insert(at, item.clone());
            return true;
        }
        *k -= 1;
    }
    t.children.iter_mut().any(|c| insert_into_compound(c, k, item, rng))
}

fn fill_hole(t: &RawTree, with: &RawTree) -> RawTree {
    if t.symbol == HOLE {
        return with.clone();
    }
    RawTree::node(t.symbol.clone(), t.children.iter().map(|c| fill_hole(c, with)).collect())
}

/// A program of exactly `size` nodes with one motif placeholder.
fn program_with_hole(size: usize, weights: &[f64; N_STMTS], rng: &mut SeededRng) -> RawTree {
    let body = statements(size - MIN_FEASIBLE_NODES, weights, rng, 0);
    let mut prog = node(
        "FuncDef",
        vec![node("Decl", vec![node("FuncDecl", vec![type_decl()])]), node("Compound", body)],
    );
    let mut k = rng.below(count_compounds(&prog));
    let inserted = insert_into_compound(&mut prog, &mut k, &leaf(HOLE), rng);
    debug_assert!(inserted);
    prog
}

fn class_weights(class: Option<usize>) -> [f64; N_STMTS] {
    let mut w = [1.0; N_STMTS];
    if let Some(c) = class {
        // Skew toward one straight-line statement kind per class.
        w[c % 8] += 4.0;
    }
    w
}

/// Generates `n_classes × per_class` labelled trees, ordered by group then
/// class in count-matched mode and round-robin by class otherwise.
pub fn generate_corpus(config: &GenConfig) -> Result<GenOutput, GenError> {
    config.validate()?;
    let lo = config.min_nodes.max(MIN_FEASIBLE_NODES);
    let mut rng = SeededRng::new(config.seed);
    let mut records = Vec::with_capacity(config.n_classes * config.per_class);
    let mut groups = Vec::new();
    for _ in 0..config.per_class {
        if config.count_matched {
            let size = rng.between(lo, config.max_nodes);
            let prog = program_with_hole(size, &class_weights(None), &mut rng);
            let start = records.len();
            for c in 0..config.n_classes {
                records.push(DatasetRecord { label: c, ast: fill_hole(&prog, &motif(c)) });
            }
            groups.push((start..records.len()).collect());
        } else {
            for c in 0..config.n_classes {
                let size = rng.between(lo, config.max_nodes);
                let prog = program_with_hole(size, &class_weights(Some(c)), &mut rng);
                records.push(DatasetRecord { label: c, ast: fill_hole(&prog, &motif(c)) });
            }
        }
    }
    Ok(GenOutput { records, groups })
}
