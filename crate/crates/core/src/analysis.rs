//! Inspection of learned symbol vectors: distances, agglomerative
//! clustering with dendrogram export, and nearest-neighbour queries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{squared_distance, DenseMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("need at least 2 symbols, got {0}")]
    TooFewSymbols(usize),
    #[error("distance matrix must be square and symmetric with a zero diagonal")]
    BadDistances,
    #[error("{labels} labels for {n} items")]
    LabelCount { labels: usize, n: usize },
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("k = {k} must be below the number of symbols ({n})")]
    TooManyNeighbors { k: usize, n: usize },
    #[error("unsupported dendrogram format `{0}`")]
    UnsupportedFormat(String),
    #[error("cannot parse dendrogram: {0}")]
    Parse(String),
}

/// Euclidean distances between the rows of `vectors`.
pub fn pairwise_distances(vectors: &DenseMatrix) -> Result<DenseMatrix, AnalysisError> {
    let n = vectors.rows();
    if n < 2 {
        return Err(AnalysisError::TooFewSymbols(n));
    }
    let mut d = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = squared_distance(vectors.row(i), vectors.row(j)).sqrt();
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    Ok(d)
}

/// `label,label,...` header then one row per item.
pub fn distances_to_csv(labels: &[String], d: &DenseMatrix) -> String {
    let quote = |s: &str| {
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    let mut out = String::from("symbol");
    for l in labels {
        out.push(',');
        out.push_str(&quote(l));
    }
    out.push('\n');
    for (i, l) in labels.iter().enumerate() {
        out.push_str(&quote(l));
        for j in 0..d.cols() {
            let _ = write!(out, ",{}", d.get(i, j));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Average,
    Single,
    Complete,
}

impl std::str::FromStr for Linkage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "average" => Ok(Self::Average),
            "single" => Ok(Self::Single),
            "complete" => Ok(Self::Complete),
            other => Err(format!("unknown linkage `{other}` (expected average, single or complete)")),
        }
    }
}

/// Cluster-to-cluster distance. Members are sorted ascending and `a[0] < b[0]`;
/// the average sums in that nested order so every caller gets identical bits.
pub fn linkage_distance(d: &DenseMatrix, a: &[usize], b: &[usize], linkage: Linkage) -> f64 {
    match linkage {
        Linkage::Average => {
            let mut sum = 0.0;
            for &i in a {
                for &j in b {
                    sum += d.get(i, j);
                }
            }
            sum / (a.len() * b.len()) as f64
        }
        Linkage::Single => a.iter().flat_map(|&i| b.iter().map(move |&j| d.get(i, j))).fold(f64::INFINITY, f64::min),
        Linkage::Complete => a.iter().flat_map(|&i| b.iter().map(move |&j| d.get(i, j))).fold(0.0, f64::max),
    }
}

/// One merge. Children are node ids: leaves are `0..n`, merge `m` is `n + m`.
/// `left` is the child containing the smaller leaf id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub labels: Vec<String>,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn n_leaves(&self) -> usize {
        self.labels.len()
    }

    /// Leaf ids below node `id`, ascending.
    pub fn members(&self, id: usize) -> Vec<usize> {
        let n = self.n_leaves();
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                let m = &self.merges[x - n];
                stack.push(m.left);
                stack.push(m.right);
            }
        }
        out.sort_unstable();
        out
    }
}

fn check_distances(d: &DenseMatrix) -> Result<usize, AnalysisError> {
    let n = d.rows();
    if n < 2 {
        return Err(AnalysisError::TooFewSymbols(n));
    }
    if d.cols() != n {
        return Err(AnalysisError::BadDistances);
    }
    for i in 0..n {
        if d.get(i, i) != 0.0 {
            return Err(AnalysisError::BadDistances);
        }
        for j in 0..i {
            let v = d.get(i, j);
            if v != d.get(j, i) || !(v >= 0.0) || !v.is_finite() {
                return Err(AnalysisError::BadDistances);
            }
        }
    }
    Ok(n)
}

/// Bottom-up clustering. At each step the closest pair of clusters merges;
/// ties go to the pair with the smallest `(min id, min id)`. Only distances
/// involving the newest cluster are recomputed.
pub fn agglomerative_cluster(d: &DenseMatrix, labels: Vec<String>, linkage: Linkage) -> Result<Dendrogram, AnalysisError> {
    let n = check_distances(d)?;
    if labels.len() != n {
        return Err(AnalysisError::LabelCount { labels: labels.len(), n });
    }
    // Active clusters keyed by slot; slot order equals min-member order
    // because a merged cluster takes the slot of its left part.
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut node_id: Vec<usize> = (0..n).collect();
    let mut cache = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            cache.set(i, j, d.get(i, j));
        }
    }
    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if members[i].is_none() {
                continue;
            }
            for j in (i + 1)..n {
                if members[j].is_none() {
                    continue;
                }
                let v = cache.get(i, j);
                if best.map_or(true, |(b, _, _)| v < b) {
                    best = Some((v, i, j));
                }
            }
        }
        let (height, i, j) = best.expect("at least two active clusters");
        let right = members[j].take().expect("active");
        let left = members[i].as_mut().expect("active");
        left.extend(right);
        left.sort_unstable();
        merges.push(Merge { left: node_id[i], right: node_id[j], height, size: left.len() });
        node_id[i] = n + step;
        let merged = members[i].clone().expect("active");
        for k in 0..n {
            if k == i {
                continue;
            }
            if let Some(other) = &members[k] {
                let (a, b, lo, hi) = if k < i { (other, &merged, k, i) } else { (&merged, other, i, k) };
                cache.set(lo, hi, linkage_distance(d, a, b, linkage));
            }
        }
    }
    Ok(Dendrogram { labels, merges })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DendrogramFormat {
    /// Nested JSON document.
    Json,
    Newick,
}

impl std::str::FromStr for DendrogramFormat {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, AnalysisError> {
        match s {
            "json" | "nested" => Ok(Self::Json),
            "newick" => Ok(Self::Newick),
            other => Err(AnalysisError::UnsupportedFormat(other.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum NestedNode {
    Leaf { leaf: usize, label: String },
    Merge { merge: usize, height: f64, children: Box<[NestedNode; 2]> },
}

#[derive(Serialize, Deserialize)]
struct NestedDoc {
    format: String,
    version: u32,
    labels: Vec<String>,
    root: NestedNode,
}

const NESTED_FORMAT: &str = "tbcnn-dendrogram";

fn nested(d: &Dendrogram, id: usize) -> NestedNode {
    let n = d.n_leaves();
    if id < n {
        NestedNode::Leaf { leaf: id, label: d.labels[id].clone() }
    } else {
        let m = &d.merges[id - n];
        NestedNode::Merge {
            merge: id - n,
            height: m.height,
            children: Box::new([nested(d, m.left), nested(d, m.right)]),
        }
    }
}

fn root_id(d: &Dendrogram) -> usize {
    d.n_leaves() + d.merges.len() - 1
}

fn quote_newick(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

fn newick(d: &Dendrogram, id: usize, parent_height: f64, out: &mut String) {
    let n = d.n_leaves();
    let height = if id < n {
        out.push_str(&quote_newick(&format!("{id}={}", d.labels[id])));
        0.0
    } else {
        let m = &d.merges[id - n];
        out.push('(');
        newick(d, m.left, m.height, out);
        out.push(',');
        newick(d, m.right, m.height, out);
        let _ = write!(out, "){}@{}", id - n, m.height);
        m.height
    };
    if id != root_id(d) {
        let _ = write!(out, ":{}", parent_height - height);
    }
}

/// Renders the dendrogram. Newick leaves are quoted `id=label`; internal
/// nodes are labelled `merge@height` and branch lengths are height gaps.
pub fn export_dendrogram(d: &Dendrogram, format: DendrogramFormat) -> String {
    match format {
        DendrogramFormat::Json => serde_json::to_string_pretty(&NestedDoc {
            format: NESTED_FORMAT.into(),
            version: 1,
            labels: d.labels.clone(),
            root: nested(d, root_id(d)),
        })
        .expect("serializable"),
        DendrogramFormat::Newick => {
            let mut s = String::new();
            newick(d, root_id(d), 0.0, &mut s);
            s.push(';');
            s
        }
    }
}

#[derive(Clone, Copy)]
enum NodeRef {
    Leaf(usize),
    Merge(usize),
}

/// Flattened parse result: leaves as `(id, label)`, merges by index.
struct Collected {
    leaves: Vec<(usize, String)>,
    merges: Vec<(usize, f64, NodeRef, NodeRef)>,
}

impl Collected {
    fn finish(mut self) -> Result<Dendrogram, AnalysisError> {
        let bad = |m: &str| AnalysisError::Parse(m.into());
        let n = self.leaves.len();
        self.leaves.sort_by_key(|l| l.0);
        if self.leaves.iter().enumerate().any(|(i, l)| l.0 != i) {
            return Err(bad("leaf ids are not 0..n"));
        }
        self.merges.sort_by_key(|m| m.0);
        if self.merges.len() + 1 != n || self.merges.iter().enumerate().any(|(i, m)| m.0 != i) {
            return Err(bad("merge indices are not 0..n-1"));
        }
        let id = |r: NodeRef| match r {
            NodeRef::Leaf(i) => i,
            NodeRef::Merge(m) => n + m,
        };
        let mut sizes = vec![1usize; n];
        let mut merges = Vec::with_capacity(n - 1);
        for &(_, height, left, right) in &self.merges {
            let (left, right) = (id(left), id(right));
            let size = sizes.get(left).zip(sizes.get(right)).map(|(a, b)| a + b).ok_or_else(|| bad("merge refers to a later node"))?;
            sizes.push(size);
            merges.push(Merge { left, right, height, size });
        }
        Ok(Dendrogram { labels: self.leaves.into_iter().map(|l| l.1).collect(), merges })
    }
}

fn collect_nested(node: &NestedNode, c: &mut Collected) -> NodeRef {
    match node {
        NestedNode::Leaf { leaf, label } => {
            c.leaves.push((*leaf, label.clone()));
            NodeRef::Leaf(*leaf)
        }
        NestedNode::Merge { merge, height, children } => {
            let l = collect_nested(&children[0], c);
            let r = collect_nested(&children[1], c);
            c.merges.push((*merge, *height, l, r));
            NodeRef::Merge(*merge)
        }
    }
}

struct NewickParser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl NewickParser<'_> {
    fn err(&self, msg: &str) -> AnalysisError {
        AnalysisError::Parse(format!("{msg} at byte {}", self.pos))
    }

    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn expect(&mut self, b: u8) -> Result<(), AnalysisError> {
        if self.peek() == Some(b) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected `{}`", b as char)))
        }
    }

    fn quoted(&mut self) -> Result<String, AnalysisError> {
        self.expect(b'\'')?;
        let mut out = Vec::new();
        loop {
            match self.peek() {
                None => return Err(self.err("unterminated quote")),
                Some(b'\'') if self.s.get(self.pos + 1) == Some(&b'\'') => {
                    out.push(b'\'');
                    self.pos += 2;
                }
                Some(b'\'') => {
                    self.pos += 1;
                    break;
                }
                Some(b) => {
                    out.push(b);
                    self.pos += 1;
                }
            }
        }
        String::from_utf8(out).map_err(|_| self.err("invalid utf-8"))
    }

    fn bare(&mut self) -> &str {
        let start = self.pos;
        while let Some(b) = self.peek() {
            if b"(),:;".contains(&b) {
                break;
            }
            self.pos += 1;
        }
        std::str::from_utf8(&self.s[start..self.pos]).unwrap_or("")
    }

    fn skip_length(&mut self) {
        if self.peek() == Some(b':') {
            self.pos += 1;
            self.bare();
        }
    }

    fn node(&mut self, c: &mut Collected) -> Result<NodeRef, AnalysisError> {
        if self.peek() == Some(b'(') {
            self.pos += 1;
            let l = self.node(c)?;
            self.expect(b',')?;
            let r = self.node(c)?;
            self.expect(b')')?;
            let label = self.bare().to_string();
            let (idx, h) = label.split_once('@').ok_or_else(|| self.err("internal label must be merge@height"))?;
            let idx: usize = idx.parse().map_err(|_| self.err("bad merge index"))?;
            let h: f64 = h.parse().map_err(|_| self.err("bad height"))?;
            self.skip_length();
            c.merges.push((idx, h, l, r));
            Ok(NodeRef::Merge(idx))
        } else {
            let label = self.quoted()?;
            let (id, name) = label.split_once('=').ok_or_else(|| self.err("leaf label must be id=label"))?;
            let id: usize = id.parse().map_err(|_| self.err("bad leaf id"))?;
            self.skip_length();
            c.leaves.push((id, name.to_string()));
            Ok(NodeRef::Leaf(id))
        }
    }
}

/// Parses the output of [`export_dendrogram`].
pub fn parse_dendrogram(text: &str, format: DendrogramFormat) -> Result<Dendrogram, AnalysisError> {
    let mut c = Collected { leaves: Vec::new(), merges: Vec::new() };
    match format {
        DendrogramFormat::Json => {
            let doc: NestedDoc = serde_json::from_str(text).map_err(|e| AnalysisError::Parse(e.to_string()))?;
            if doc.format != NESTED_FORMAT || doc.version != 1 {
                return Err(AnalysisError::Parse("not a version-1 dendrogram document".into()));
            }
            collect_nested(&doc.root, &mut c);
            let d = c.finish()?;
            if d.labels != doc.labels {
                return Err(AnalysisError::Parse("leaf labels disagree with the label list".into()));
            }
            Ok(d)
        }
        DendrogramFormat::Newick => {
            let text = text.trim();
            let body = text.strip_suffix(';').ok_or_else(|| AnalysisError::Parse("missing trailing `;`".into()))?;
            let mut p = NewickParser { s: body.as_bytes(), pos: 0 };
            p.node(&mut c)?;
            if p.pos != body.len() {
                return Err(p.err("trailing input"));
            }
            c.finish()
        }
    }
}

/// The `k` symbols closest to `query` (excluding itself), ascending by
/// distance with ties broken by id.
pub fn nearest_neighbors(
    vectors: &DenseMatrix,
    labels: &[String],
    query: &str,
    k: usize,
) -> Result<Vec<(usize, f64)>, AnalysisError> {
    let n = vectors.rows();
    if labels.len() != n {
        return Err(AnalysisError::LabelCount { labels: labels.len(), n });
    }
    let q = labels.iter().position(|l| l == query).ok_or_else(|| AnalysisError::UnknownSymbol(query.into()))?;
    if k >= n {
        return Err(AnalysisError::TooManyNeighbors { k, n });
    }
    let mut all: Vec<(usize, f64)> = (0..n)
        .filter(|&i| i != q)
        .map(|i| (i, squared_distance(vectors.row(q), vectors.row(i)).sqrt()))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("S{i}")).collect()
    }

    fn points(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn distance_examples() {
        let d = pairwise_distances(&points(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert_eq!(d.get(0, 1), 2f64.sqrt());
        assert_eq!(d.get(0, 2), 0.0);
        for i in 0..3 {
            assert_eq!(d.get(i, i), 0.0);
            for j in 0..3 {
                assert_eq!(d.get(i, j), d.get(j, i));
            }
        }
        assert_eq!(pairwise_distances(&points(&[&[1.0]])), Err(AnalysisError::TooFewSymbols(1)));
        let csv = distances_to_csv(&names(3), &d);
        assert!(csv.starts_with("symbol,S0,S1,S2\nS0,0,"));
    }

    #[test]
    fn line_geometry_merges_nearest_first() {
        let d = pairwise_distances(&points(&[&[0.0], &[1.0], &[10.0]])).unwrap();
        for linkage in [Linkage::Average, Linkage::Single, Linkage::Complete] {
            let den = agglomerative_cluster(&d, names(3), linkage).unwrap();
            assert_eq!(den.merges.len(), 2);
            assert_eq!((den.merges[0].left, den.merges[0].right), (0, 1));
            assert_eq!(den.merges[0].height, 1.0);
            assert_eq!((den.merges[1].left, den.merges[1].right), (3, 2));
            let expected = match linkage {
                Linkage::Average => 9.5,
                Linkage::Single => 9.0,
                Linkage::Complete => 10.0,
            };
            assert_eq!(den.merges[1].height, expected);
            assert_eq!(den.members(4), vec![0, 1, 2]);
        }
    }

    #[test]
    fn ties_break_by_smallest_pair() {
        // Four corners of a unit square: every side ties at 1.
        let d = pairwise_distances(&points(&[&[0.0, 0.0], &[1.0, 0.0], &[1.0, 1.0], &[0.0, 1.0]])).unwrap();
        let den = agglomerative_cluster(&d, names(4), Linkage::Single).unwrap();
        assert_eq!((den.merges[0].left, den.merges[0].right), (0, 1));
        assert_eq!((den.merges[1].left, den.merges[1].right), (4, 2));
    }

    /// Recomputes every cluster pair from scratch at each step.
    pub(crate) fn naive_cluster(d: &DenseMatrix, linkage: Linkage) -> Vec<Merge> {
        let n = d.rows();
        let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
        let mut merges = Vec::new();
        for step in 0..n - 1 {
            clusters.sort_by_key(|c| c.1[0]);
            let mut best = (f64::INFINITY, 0, 0);
            for a in 0..clusters.len() {
                for b in (a + 1)..clusters.len() {
                    let v = linkage_distance(d, &clusters[a].1, &clusters[b].1, linkage);
                    if v < best.0 {
                        best = (v, a, b);
                    }
                }
            }
            let (h, a, b) = best;
            let (rid, rm) = clusters.remove(b);
            let (lid, lm) = clusters[a].clone();
            let mut m: Vec<usize> = lm.into_iter().chain(rm).collect();
            m.sort_unstable();
            merges.push(Merge { left: lid, right: rid, height: h, size: m.len() });
            clusters[a] = (n + step, m);
        }
        merges
    }

    fn random_points(n: usize, dim: usize, rng: &mut SeededRng) -> DenseMatrix {
        DenseMatrix::random_uniform(n, dim, 1.0, rng)
    }

    #[test]
    fn matches_naive_oracle_on_random_instances() {
        let mut rng = SeededRng::new(17);
        for _ in 0..200 {
            let d = pairwise_distances(&random_points(8, 3, &mut rng)).unwrap();
            for linkage in [Linkage::Average, Linkage::Single, Linkage::Complete] {
                let den = agglomerative_cluster(&d, names(8), linkage).unwrap();
                assert_eq!(den.merges, naive_cluster(&d, linkage));
                assert_eq!(den.merges.len(), 7);
                assert!(den.merges.windows(2).all(|w| w[0].height <= w[1].height));
            }
        }
    }

    #[test]
    fn export_round_trips() {
        let mut rng = SeededRng::new(4);
        let mut labels = names(9);
        labels[2] = "it's, (odd)=x".into();
        labels[5] = "<UNK>".into();
        for _ in 0..50 {
            let d = pairwise_distances(&random_points(9, 4, &mut rng)).unwrap();
            let den = agglomerative_cluster(&d, labels.clone(), Linkage::Average).unwrap();
            for f in [DendrogramFormat::Json, DendrogramFormat::Newick] {
                let text = export_dendrogram(&den, f);
                assert_eq!(parse_dendrogram(&text, f).unwrap(), den, "{f:?}: {text}");
            }
        }
        let two = agglomerative_cluster(&pairwise_distances(&points(&[&[0.0], &[2.0]])).unwrap(), names(2), Linkage::Average).unwrap();
        let nw = export_dendrogram(&two, DendrogramFormat::Newick);
        assert_eq!(nw, "('0=S0':2,'1=S1':2)0@2;");
        assert!(export_dendrogram(&two, DendrogramFormat::Json).contains("\"merge\": 0"));
        assert!("svg".parse::<DendrogramFormat>().is_err());
        assert!(parse_dendrogram("('0=S0':2,'1=S1':2)0@2", DendrogramFormat::Newick).is_err());
    }

    #[test]
    fn nearest_neighbor_examples() {
        let v = points(&[&[0.0, 0.0], &[3.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]]);
        let l = names(4);
        let nn = nearest_neighbors(&v, &l, "S0", 3).unwrap();
        assert_eq!(nn, vec![(2, 0.0), (3, 2f64.sqrt()), (1, 3.0)]);
        assert_eq!(nearest_neighbors(&v, &l, "S9", 1), Err(AnalysisError::UnknownSymbol("S9".into())));
        assert_eq!(nearest_neighbors(&v, &l, "S0", 4), Err(AnalysisError::TooManyNeighbors { k: 4, n: 4 }));

        let mut rng = SeededRng::new(8);
        let v = random_points(12, 3, &mut rng);
        let l = names(12);
        let d = pairwise_distances(&v).unwrap();
        let mut oracle: Vec<(usize, f64)> = (1..12).map(|j| (j, d.get(0, j))).collect();
        oracle.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        assert_eq!(nearest_neighbors(&v, &l, "S0", 11).unwrap(), oracle);
    }

    proptest! {
        #[test]
        fn relabeling_relabels_leaves(seed in 0u64..1000, n in 2usize..9) {
            let mut rng = SeededRng::new(seed);
            let v = random_points(n, 3, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let rows: Vec<&[f64]> = (0..n).map(|i| v.row(perm[i])).collect();
            let pv = DenseMatrix::from_rows(&rows).unwrap();
            let a = agglomerative_cluster(&pairwise_distances(&v).unwrap(), names(n), Linkage::Average).unwrap();
            let b = agglomerative_cluster(&pairwise_distances(&pv).unwrap(), names(n), Linkage::Average).unwrap();
            // Same clusters (as sets of original ids) at the same heights.
            let canon = |d: &Dendrogram, map: &dyn Fn(usize) -> usize| {
                let mut out: Vec<(Vec<usize>, u64)> = (0..d.merges.len())
                    .map(|m| {
                        let mut s: Vec<usize> = d.members(n + m).into_iter().map(map).collect();
                        s.sort_unstable();
                        (s, d.merges[m].height.to_bits())
                    })
                    .collect();
                out.sort();
                out
            };
            let ca = canon(&a, &|i| i);
            let cb = canon(&b, &|i| perm[i]);
            // Heights of average linkage can differ in the last bit when the
            // summation order changes; compare the cluster sets exactly.
            let sets = |c: &Vec<(Vec<usize>, u64)>| c.iter().map(|x| x.0.clone()).collect::<Vec<_>>();
            prop_assert_eq!(sets(&ca), sets(&cb));
        }
    }
}
