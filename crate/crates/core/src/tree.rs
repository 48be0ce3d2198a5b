//! Tree topologies for the tree-Wasserstein distance.
//!
//! A topology is stored through its leaf-ancestor incidence matrix `B`
//! (`n_nodes × n_leaves`, `B[i][j] = 1` iff node `i` lies on the path from
//! the root to leaf `j`, leaf included) and the edge weight `w[i]` of the
//! edge joining node `i` to its parent. The root itself carries no edge and
//! is not stored. Internal nodes come first in breadth-first order, leaves
//! follow in index order.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("a tree needs at least one leaf")]
    NoLeaves,
    #[error("{what} must be positive")]
    ZeroCount { what: &'static str },
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid topology: {0}")]
    Invalid(TopologyViolation),
    #[error("malformed topology document: {0}")]
    Document(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimplexError {
    #[error("entry {index} is negative or non-finite ({value})")]
    BadEntry { index: usize, value: f64 },
    #[error("entries sum to {sum}, not 1")]
    Sum { sum: f64 },
    #[error("empty probability vector")]
    Empty,
}

/// First invariant broken by a candidate topology.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyViolation {
    #[error("B has {rows} rows but n_nodes = {n_nodes}")]
    RowCount { rows: usize, n_nodes: usize },
    #[error("row {row} of B has {cols} columns, expected {n_leaves}")]
    ColumnCount {
        row: usize,
        cols: usize,
        n_leaves: usize,
    },
    #[error("w has length {len}, expected {n_nodes}")]
    WeightLength { len: usize, n_nodes: usize },
    #[error("edge weight w[{node}] = {value} is negative or non-finite")]
    BadWeight { node: usize, value: f64 },
    #[error("leaf {leaf} maps to node {node}, which is out of range")]
    LeafOutOfRange { leaf: usize, node: usize },
    #[error("leaf {leaf}: own row {node} does not contain exactly the leaf")]
    LeafRow { leaf: usize, node: usize },
    #[error("leaf column {leaf}: nodes {first} and {second} are not nested, so the column is not a root path")]
    NotRootPath {
        leaf: usize,
        first: usize,
        second: usize,
    },
    #[error("node {node} has no leaf below it")]
    EmptyNode { node: usize },
}

/// Nonnegative vector whose entries sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexVector<T>(Vec<T>);

impl<T: Scalar> SimplexVector<T> {
    pub fn new(a: Vec<T>) -> Result<Self, SimplexError> {
        if a.is_empty() {
            return Err(SimplexError::Empty);
        }
        for (index, &v) in a.iter().enumerate() {
            if !v.is_finite() || v < T::zero() {
                return Err(SimplexError::BadEntry {
                    index,
                    value: v.as_f64(),
                });
            }
        }
        let sum: T = a.iter().copied().sum();
        if (sum - T::one()).abs() > T::simplex_tol() {
            return Err(SimplexError::Sum { sum: sum.as_f64() });
        }
        Ok(Self(a))
    }

    /// Normalizes a nonnegative vector with positive mass.
    pub fn normalized(a: Vec<T>) -> Result<Self, SimplexError> {
        let sum: T = a.iter().copied().sum();
        if sum <= T::zero() || !sum.is_finite() {
            return Err(SimplexError::Sum { sum: sum.as_f64() });
        }
        Self::new(a.into_iter().map(|v| v / sum).collect())
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut a = vec![T::zero(); n];
        a[k] = T::one();
        Self(a)
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![T::one() / T::from_usize_lossy(n); n])
    }

    /// Draw from the flat Dirichlet distribution.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        Self(draws.into_iter().map(|v| T::lit(v / total)).collect())
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<T> AsRef<[T]> for SimplexVector<T> {
    fn as_ref(&self) -> &[T] {
        &self.0
    }
}

/// Rooted tree with weighted edges, described by its ancestor matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeTopology<T> {
    n_nodes: usize,
    n_leaves: usize,
    /// Row-major `n_nodes × n_leaves` incidence.
    b: Vec<bool>,
    w: Vec<T>,
    leaf_ids: Vec<usize>,
}

impl<T: Scalar> TreeTopology<T> {
    /// Builds and validates a topology from raw parts.
    pub fn from_parts(
        n_nodes: usize,
        n_leaves: usize,
        b: Vec<Vec<bool>>,
        w: Vec<T>,
    ) -> Result<Self, TreeError> {
        if n_leaves == 0 {
            return Err(TreeError::NoLeaves);
        }
        if b.len() != n_nodes {
            return Err(TreeError::Invalid(TopologyViolation::RowCount {
                rows: b.len(),
                n_nodes,
            }));
        }
        for (row, r) in b.iter().enumerate() {
            if r.len() != n_leaves {
                return Err(TreeError::Invalid(TopologyViolation::ColumnCount {
                    row,
                    cols: r.len(),
                    n_leaves,
                }));
            }
        }
        // A leaf node is the unique node whose row is exactly {j}; the
        // deepest such row is the leaf itself when a unary chain shares it.
        let mut leaf_ids = Vec::with_capacity(n_leaves);
        for j in 0..n_leaves {
            let own = (0..n_nodes)
                .rev()
                .find(|&i| b[i][j] && b[i].iter().filter(|&&x| x).count() == 1)
                .unwrap_or(usize::MAX);
            leaf_ids.push(own);
        }
        let topo = Self {
            n_nodes,
            n_leaves,
            b: b.into_iter().flatten().collect(),
            w,
            leaf_ids,
        };
        topo.validate().map_err(TreeError::Invalid)?;
        Ok(topo)
    }

    /// Depth-one star: each leaf hangs directly from the root. `B = I`.
    pub fn tv(n_leaves: usize, edge_weight: T) -> Result<Self, TreeError> {
        if n_leaves == 0 {
            return Err(TreeError::NoLeaves);
        }
        let b = (0..n_leaves)
            .map(|i| (0..n_leaves).map(|j| i == j).collect())
            .collect();
        Self::from_parts(n_leaves, n_leaves, b, vec![edge_weight; n_leaves])
    }

    /// Two-level tree: root → `n_clusters` internal nodes → leaves.
    /// Leaf `j` belongs to cluster `j / leaves_per_cluster`.
    pub fn cluster(
        n_clusters: usize,
        leaves_per_cluster: usize,
        internal_weight: T,
        leaf_weight: T,
    ) -> Result<Self, TreeError> {
        if n_clusters == 0 {
            return Err(TreeError::ZeroCount { what: "n_clusters" });
        }
        if leaves_per_cluster == 0 {
            return Err(TreeError::ZeroCount {
                what: "leaves_per_cluster",
            });
        }
        let n_leaves = n_clusters * leaves_per_cluster;
        let mut b = Vec::with_capacity(n_clusters + n_leaves);
        for c in 0..n_clusters {
            b.push(
                (0..n_leaves)
                    .map(|j| j / leaves_per_cluster == c)
                    .collect(),
            );
        }
        for i in 0..n_leaves {
            b.push((0..n_leaves).map(|j| i == j).collect());
        }
        let mut w = vec![internal_weight; n_clusters];
        w.extend(std::iter::repeat_n(leaf_weight, n_leaves));
        Self::from_parts(n_clusters + n_leaves, n_leaves, b, w)
    }

    /// Chain (caterpillar) tree realizing points on a line.
    ///
    /// The spine is `root = s₁ → s₂ → … → sₙ`, leaf `j` hangs from `sⱼ`
    /// through a zero-weight edge, and `gaps[k]` is the weight of the spine
    /// edge into `s_{k+2}`, i.e. the distance between leaves `k` and `k+1`.
    pub fn chain(n_leaves: usize, gaps: &[T]) -> Result<Self, TreeError> {
        if n_leaves == 0 {
            return Err(TreeError::NoLeaves);
        }
        if gaps.len() + 1 != n_leaves {
            return Err(TreeError::WeightCount {
                expected: n_leaves - 1,
                got: gaps.len(),
            });
        }
        let spine = n_leaves - 1;
        let mut b = Vec::with_capacity(spine + n_leaves);
        // spine node k (0-based) is s_{k+2}: its subtree holds leaves k+1..n
        for k in 0..spine {
            b.push((0..n_leaves).map(|j| j > k).collect());
        }
        for i in 0..n_leaves {
            b.push((0..n_leaves).map(|j| i == j).collect());
        }
        let mut w = gaps.to_vec();
        w.extend(std::iter::repeat_n(T::zero(), n_leaves));
        Self::from_parts(spine + n_leaves, n_leaves, b, w)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    pub fn weights(&self) -> &[T] {
        &self.w
    }

    pub fn leaf_ids(&self) -> &[usize] {
        &self.leaf_ids
    }

    #[inline]
    pub fn b(&self, node: usize, leaf: usize) -> bool {
        self.b[node * self.n_leaves + leaf]
    }

    pub fn b_rows(&self) -> Vec<Vec<bool>> {
        self.b.chunks(self.n_leaves).map(<[bool]>::to_vec).collect()
    }

    /// `Bᵀw`, the total edge weight on each root-to-leaf path.
    pub fn path_weights(&self) -> Vec<T> {
        (0..self.n_leaves)
            .map(|j| {
                (0..self.n_nodes)
                    .filter(|&i| self.b(i, j))
                    .map(|i| self.w[i])
                    .sum()
            })
            .collect()
    }

    /// Whether every root-to-leaf path has unit total weight.
    pub fn has_unit_paths(&self, tol: T) -> bool {
        self.path_weights()
            .iter()
            .all(|&s| (s - T::one()).abs() <= tol)
    }

    /// `(diag(w) B)ᵀ` as a dense row-major `n_leaves × n_nodes` matrix, so
    /// that a batch of simplex rows times it gives the tree embeddings.
    pub fn embedding_matrix_t(&self) -> Vec<T> {
        let mut m = vec![T::zero(); self.n_leaves * self.n_nodes];
        for i in 0..self.n_nodes {
            for j in 0..self.n_leaves {
                if self.b(i, j) {
                    m[j * self.n_nodes + i] = self.w[i];
                }
            }
        }
        m
    }

    /// `diag(w) B a`.
    pub fn embed(&self, a: &[T]) -> Result<Vec<T>, TreeError> {
        if a.len() != self.n_leaves {
            return Err(TreeError::Dimension {
                expected: self.n_leaves,
                got: a.len(),
            });
        }
        Ok((0..self.n_nodes)
            .map(|i| {
                let row = &self.b[i * self.n_leaves..(i + 1) * self.n_leaves];
                let mass: T = row
                    .iter()
                    .zip(a)
                    .filter(|(&on, _)| on)
                    .map(|(_, &v)| v)
                    .sum();
                self.w[i] * mass
            })
            .collect())
    }

    /// Leaf-to-leaf path lengths `wᵀ(bᵢ + bⱼ − 2 bᵢ∘bⱼ)`.
    pub fn shortest_path_matrix(&self) -> Vec<Vec<T>> {
        let n = self.n_leaves;
        let mut d = vec![vec![T::zero(); n]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let mut s = T::zero();
                for node in 0..self.n_nodes {
                    if self.b(node, i) != self.b(node, j) {
                        s += self.w[node];
                    }
                }
                d[i][j] = s;
                d[j][i] = s;
            }
        }
        d
    }

    /// Checks every structural invariant, reporting the first violation.
    pub fn validate(&self) -> Result<(), TopologyViolation> {
        let (n, m) = (self.n_nodes, self.n_leaves);
        if self.b.len() != n * m {
            return Err(TopologyViolation::RowCount {
                rows: self.b.len() / m.max(1),
                n_nodes: n,
            });
        }
        if self.w.len() != n {
            return Err(TopologyViolation::WeightLength {
                len: self.w.len(),
                n_nodes: n,
            });
        }
        for (node, &v) in self.w.iter().enumerate() {
            if !v.is_finite() || v < T::zero() {
                return Err(TopologyViolation::BadWeight {
                    node,
                    value: v.as_f64(),
                });
            }
        }
        for node in 0..n {
            if !(0..m).any(|j| self.b(node, j)) {
                return Err(TopologyViolation::EmptyNode { node });
            }
        }
        for (leaf, &node) in self.leaf_ids.iter().enumerate() {
            if node >= n {
                return Err(TopologyViolation::LeafOutOfRange { leaf, node });
            }
            let exact = (0..m).all(|j| self.b(node, j) == (j == leaf));
            if !exact {
                return Err(TopologyViolation::LeafRow { leaf, node });
            }
        }
        // Ancestors of a leaf must form a chain: any two rows sharing the
        // leaf have nested supports.
        for leaf in 0..m {
            let on: Vec<usize> = (0..n).filter(|&i| self.b(i, leaf)).collect();
            for (x, &p) in on.iter().enumerate() {
                for &q in &on[x + 1..] {
                    let p_in_q = (0..m).all(|j| !self.b(p, j) || self.b(q, j));
                    let q_in_p = (0..m).all(|j| !self.b(q, j) || self.b(p, j));
                    if !p_in_q && !q_in_p {
                        return Err(TopologyViolation::NotRootPath {
                            leaf,
                            first: p,
                            second: q,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_document(&self) -> TopologyDocument {
        TopologyDocument {
            n_nodes: self.n_nodes,
            n_leaves: self.n_leaves,
            b: self
                .b
                .chunks(self.n_leaves)
                .map(|r| r.iter().map(|&x| if x { '1' } else { '0' }).collect())
                .collect(),
            w: self.w.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn from_document(doc: &TopologyDocument) -> Result<Self, TreeError> {
        let b = doc
            .b
            .iter()
            .enumerate()
            .map(|(row, s)| {
                s.chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        other => Err(TreeError::Document(format!(
                            "row {row}: unexpected character {other:?}"
                        ))),
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let w = doc.w.iter().map(|&v| T::lit(v)).collect();
        Self::from_parts(doc.n_nodes, doc.n_leaves, b, w)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("document serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TreeError> {
        let doc: TopologyDocument =
            serde_json::from_str(s).map_err(|e| TreeError::Document(e.to_string()))?;
        Self::from_document(&doc)
    }
}

/// Serialized form: `B` rows as bitstrings, weights as plain numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyDocument {
    pub n_nodes: usize,
    pub n_leaves: usize,
    #[serde(rename = "B")]
    pub b: Vec<String>,
    pub w: Vec<f64>,
}
