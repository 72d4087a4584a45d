//! AST data model, the JSON interchange format, symbol vocabulary and the
//! per-node annotations (leaf counts, depths, leaf spans) used downstream.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AstError {
    #[error("malformed document: {0}")]
    Malformed(String),
    #[error("empty tree")]
    EmptyTree,
    #[error("node {node} references child {child} which is out of range")]
    ChildOutOfRange { node: usize, child: usize },
    #[error("root index {0} out of range")]
    RootOutOfRange(usize),
    #[error("node {0} has more than one parent")]
    MultiParent(usize),
    #[error("root node {0} appears as a child")]
    RootHasParent(usize),
    #[error("node {0} is not reachable from the root (cycle or detached node)")]
    Unreachable(usize),
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("symbol id {0} is out of range for the vocabulary")]
    SymbolOutOfRange(usize),
    #[error("duplicate symbol `{0}` in vocabulary")]
    DuplicateSymbol(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("node {0} is a leaf")]
    LeafNode(usize),
    #[error("dataset line {line}: {reason}")]
    DatasetLine { line: usize, reason: String },
}

/// Name of the reserved out-of-vocabulary symbol.
pub const UNK_SYMBOL: &str = "<UNK>";

/// Dense, first-occurrence ordered symbol table.
///
/// Ids `0..len()` are real symbols; id `len()` is reserved for `<UNK>`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SymbolVocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl SymbolVocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_symbols<I, S>(symbols: I) -> Result<Self, AstError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for s in symbols {
            let s = s.into();
            if s == UNK_SYMBOL || vocab.index.contains_key(&s) {
                return Err(AstError::DuplicateSymbol(s));
            }
            vocab.intern(&s);
        }
        Ok(vocab)
    }

    /// Id of `symbol`, inserting it at the end if new.
    pub fn intern(&mut self, symbol: &str) -> usize {
        if let Some(&id) = self.index.get(symbol) {
            return id;
        }
        let id = self.symbols.len();
        self.symbols.push(symbol.to_owned());
        self.index.insert(symbol.to_owned(), id);
        id
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    /// Id of `symbol`, or the `<UNK>` id.
    pub fn id_or_unk(&self, symbol: &str) -> usize {
        self.id(symbol).unwrap_or(self.unk_id())
    }

    pub fn unk_id(&self) -> usize {
        self.symbols.len()
    }

    /// Number of real symbols (excluding `<UNK>`).
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Number of ids including `<UNK>`.
    pub fn len_with_unk(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        match id.cmp(&self.symbols.len()) {
            std::cmp::Ordering::Less => Some(&self.symbols[id]),
            std::cmp::Ordering::Equal => Some(UNK_SYMBOL),
            std::cmp::Ordering::Greater => None,
        }
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

impl Serialize for SymbolVocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.symbols.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymbolVocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let symbols = Vec::<String>::deserialize(d)?;
        SymbolVocab::from_symbols(symbols).map_err(serde::de::Error::custom)
    }
}

/// One node of the interchange document:
/// `{"symbol": <string>, "children": [<node>, ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTree {
    pub symbol: String,
    pub children: Vec<RawTree>,
}

impl RawTree {
    pub fn leaf(symbol: impl Into<String>) -> Self {
        Self {
            symbol: symbol.into(),
            children: Vec::new(),
        }
    }

    pub fn node(symbol: impl Into<String>, children: Vec<RawTree>) -> Self {
        Self {
            symbol: symbol.into(),
            children,
        }
    }

    /// Pre-order symbol sequence.
    pub fn preorder_symbols(&self) -> Vec<&str> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(n) = stack.pop() {
            out.push(n.symbol.as_str());
            stack.extend(n.children.iter().rev());
        }
        out
    }

    pub fn node_count(&self) -> usize {
        let mut count = 0;
        let mut stack = vec![self];
        while let Some(n) = stack.pop() {
            count += 1;
            stack.extend(n.children.iter());
        }
        count
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tree serialization cannot fail")
    }
}

/// Parses one interchange document.
pub fn parse_tree(text: &str) -> Result<RawTree, AstError> {
    if text.trim().is_empty() {
        return Err(AstError::EmptyTree);
    }
    let tree: RawTree = serde_json::from_str(text).map_err(|e| AstError::Malformed(e.to_string()))?;
    check_symbols(&tree)?;
    Ok(tree)
}

fn check_symbols(tree: &RawTree) -> Result<(), AstError> {
    let mut stack = vec![tree];
    while let Some(n) = stack.pop() {
        if n.symbol.is_empty() {
            return Err(AstError::Malformed("empty symbol string".into()));
        }
        stack.extend(n.children.iter());
    }
    Ok(())
}

/// What to do with symbols missing from the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownSymbols {
    /// Append them to the vocabulary.
    Extend,
    /// Map them to the reserved `<UNK>` id.
    MapToUnk,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AstNode {
    pub symbol: usize,
    pub children: Vec<usize>,
}

/// Validated rooted ordered tree of symbol ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ast {
    nodes: Vec<AstNode>,
    root: usize,
}

impl Ast {
    /// Validates that `nodes` form exactly one tree rooted at `root`.
    pub fn new(nodes: Vec<AstNode>, root: usize) -> Result<Self, AstError> {
        if nodes.is_empty() {
            return Err(AstError::EmptyTree);
        }
        if root >= nodes.len() {
            return Err(AstError::RootOutOfRange(root));
        }
        let mut has_parent = vec![false; nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            for &c in &n.children {
                if c >= nodes.len() {
                    return Err(AstError::ChildOutOfRange { node: i, child: c });
                }
                if c == root {
                    return Err(AstError::RootHasParent(root));
                }
                if std::mem::replace(&mut has_parent[c], true) {
                    return Err(AstError::MultiParent(c));
                }
            }
        }
        // With single parents, anything off the root's tree is detached or cyclic.
        let mut seen = vec![false; nodes.len()];
        let mut stack = vec![root];
        while let Some(i) = stack.pop() {
            seen[i] = true;
            stack.extend(nodes[i].children.iter().copied());
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(AstError::Unreachable(i));
        }
        Ok(Self { nodes, root })
    }

    /// Converts an interchange tree into pre-order indexed nodes.
    pub fn from_raw(
        raw: &RawTree,
        vocab: &mut SymbolVocab,
        policy: UnknownSymbols,
    ) -> Result<Self, AstError> {
        let mut nodes: Vec<AstNode> = Vec::new();
        // (node, parent index)
        let mut stack: Vec<(&RawTree, Option<usize>)> = vec![(raw, None)];
        while let Some((n, parent)) = stack.pop() {
            if n.symbol.is_empty() {
                return Err(AstError::Malformed("empty symbol string".into()));
            }
            let symbol = match (vocab.id(&n.symbol), policy) {
                (Some(id), _) => id,
                (None, UnknownSymbols::Extend) => vocab.intern(&n.symbol),
                (None, UnknownSymbols::MapToUnk) => vocab.unk_id(),
                (None, UnknownSymbols::Reject) => {
                    return Err(AstError::UnknownSymbol(n.symbol.clone()))
                }
            };
            let idx = nodes.len();
            nodes.push(AstNode {
                symbol,
                children: Vec::with_capacity(n.children.len()),
            });
            if let Some(p) = parent {
                nodes[p].children.push(idx);
            }
            stack.extend(n.children.iter().rev().map(|c| (c, Some(idx))));
        }
        Self::new(nodes, 0)
    }

    pub fn to_raw(&self, vocab: &SymbolVocab) -> Result<RawTree, AstError> {
        fn build(ast: &Ast, vocab: &SymbolVocab, i: usize) -> Result<RawTree, AstError> {
            let n = &ast.nodes[i];
            let symbol = vocab
                .symbol(n.symbol)
                .ok_or(AstError::SymbolOutOfRange(n.symbol))?;
            let children = n
                .children
                .iter()
                .map(|&c| build(ast, vocab, c))
                .collect::<Result<_, _>>()?;
            Ok(RawTree::node(symbol, children))
        }
        build(self, vocab, self.root)
    }

    pub fn nodes(&self) -> &[AstNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &AstNode {
        &self.nodes[i]
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbol(&self, i: usize) -> usize {
        self.nodes[i].symbol
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.nodes[i].children
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.nodes[i].children.is_empty()
    }

    /// Node indices with every parent before its children.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(i) = stack.pop() {
            out.push(i);
            stack.extend(self.nodes[i].children.iter().rev().copied());
        }
        out
    }
}

/// Parses a document and converts it in one step.
pub fn load_ast(
    text: &str,
    vocab: &mut SymbolVocab,
    policy: UnknownSymbols,
) -> Result<Ast, AstError> {
    Ast::from_raw(&parse_tree(text)?, vocab, policy)
}

/// Vocabulary over a corpus, ids in first-occurrence (pre-order) order.
pub fn build_vocab<'a, I>(corpus: I) -> Result<SymbolVocab, AstError>
where
    I: IntoIterator<Item = &'a RawTree>,
{
    let mut vocab = SymbolVocab::new();
    let mut any = false;
    for tree in corpus {
        any = true;
        for s in tree.preorder_symbols() {
            if s == UNK_SYMBOL {
                continue;
            }
            vocab.intern(s);
        }
    }
    if !any {
        return Err(AstError::EmptyCorpus);
    }
    Ok(vocab)
}

/// An [`Ast`] with leaf counts, depths and leaf spans.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedAst {
    ast: Ast,
    leaf_count: Vec<usize>,
    depth: Vec<usize>,
    leaf_span: Vec<(usize, usize)>,
    h_pos: Vec<f64>,
    mean_leaf_depth: f64,
}

/// Computes every annotation in one pre-order pass plus one reverse pass.
pub fn annotate(ast: Ast) -> AnnotatedAst {
    let n = ast.len();
    let order = ast.preorder();
    let mut depth = vec![0usize; n];
    depth[ast.root()] = 1;
    for &i in &order {
        for &c in ast.children(i) {
            depth[c] = depth[i] + 1;
        }
    }
    let mut leaf_count = vec![0usize; n];
    for &i in order.iter().rev() {
        leaf_count[i] = if ast.is_leaf(i) {
            1
        } else {
            ast.children(i).iter().map(|&c| leaf_count[c]).sum()
        };
    }
    let mut leaf_span = vec![(0usize, 0usize); n];
    leaf_span[ast.root()] = (0, leaf_count[ast.root()]);
    for &i in &order {
        let mut lo = leaf_span[i].0;
        for &c in ast.children(i) {
            leaf_span[c] = (lo, lo + leaf_count[c]);
            lo += leaf_count[c];
        }
    }
    let total = leaf_count[ast.root()] as f64;
    let h_pos = leaf_span
        .iter()
        .map(|&(lo, hi)| (lo + hi) as f64 / 2.0 / total)
        .collect();
    let (depth_sum, leaves) = (0..n)
        .filter(|&i| ast.is_leaf(i))
        .fold((0usize, 0usize), |(s, k), i| (s + depth[i], k + 1));
    AnnotatedAst {
        mean_leaf_depth: depth_sum as f64 / leaves as f64,
        ast,
        leaf_count,
        depth,
        leaf_span,
        h_pos,
    }
}

impl AnnotatedAst {
    pub fn ast(&self) -> &Ast {
        &self.ast
    }

    pub fn len(&self) -> usize {
        self.ast.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn leaf_count(&self, i: usize) -> usize {
        self.leaf_count[i]
    }

    /// 1-based depth; the root has depth 1.
    pub fn depth(&self, i: usize) -> usize {
        self.depth[i]
    }

    /// Half-open interval of leaf ordinals under node `i`.
    pub fn leaf_span(&self, i: usize) -> (usize, usize) {
        self.leaf_span[i]
    }

    /// Midpoint of the leaf span normalized by the total leaf count.
    pub fn h_pos(&self, i: usize) -> f64 {
        self.h_pos[i]
    }

    pub fn total_leaves(&self) -> usize {
        self.leaf_count[self.ast.root()]
    }

    pub fn mean_leaf_depth(&self) -> f64 {
        self.mean_leaf_depth
    }

    /// `l_i = leaves(c_i) / leaves(node)` for each child of a non-leaf node.
    pub fn child_coefficients(&self, node: usize) -> Result<Vec<f64>, AstError> {
        if self.ast.is_leaf(node) {
            return Err(AstError::LeafNode(node));
        }
        let total = self.leaf_count[node] as f64;
        Ok(self
            .ast
            .children(node)
            .iter()
            .map(|&c| self.leaf_count[c] as f64 / total)
            .collect())
    }
}

/// One line of a dataset file: `{"label": <n>, "ast": <node>}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub label: usize,
    pub ast: RawTree,
}

/// Reads a dataset file body. Blank lines are skipped.
pub fn parse_dataset(text: &str) -> Result<Vec<DatasetRecord>, AstError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| AstError::DatasetLine {
            line: i + 1,
            reason: e.to_string(),
        })?;
        check_symbols(&rec.ast).map_err(|e| AstError::DatasetLine {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_dataset(records: &[DatasetRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serialization cannot fail"));
        out.push('\n');
    }
    out
}

impl fmt::Display for RawTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_json())
    }
}

/// The AST of `int a = b + 3;`.
pub fn decl_example_tree() -> RawTree {
    RawTree::node(
        "Decl",
        vec![
            RawTree::node("TypeDecl", vec![RawTree::leaf("IdentifierType")]),
            RawTree::node("BinaryOp", vec![RawTree::leaf("ID"), RawTree::leaf("Constant")]),
        ],
    )
}
