//! Closed-form distances and divergences between simplex vectors.

use thiserror::Error;

use crate::scalar::Scalar;
use crate::tree::TreeTopology;

/// Smoothing added to every bin before the KL terms of the Jeffrey divergence.
pub const JD_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistanceError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("input is not a probability vector (sum {sum}, min {min})")]
    NotSimplex { sum: f64, min: f64 },
    #[error("Jeffrey bound needs unit root-to-leaf weights, but leaf {leaf} has path weight {path_weight}")]
    PathWeight { leaf: usize, path_weight: f64 },
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("smoothing must be positive")]
    Smoothing,
}

/// Similarity family compared in the experiments.
#[derive(Debug, Clone, PartialEq)]
pub enum DistanceKind<T> {
    Twd(TreeTopology<T>),
    TotalVariation,
    Cosine,
}

impl<T: Scalar> DistanceKind<T> {
    /// Dissimilarity used by nearest-neighbour search: TWD, TV, or
    /// `1 − cos` for the cosine family.
    pub fn distance(&self, x: &[T], y: &[T]) -> Result<T, DistanceError> {
        match self {
            DistanceKind::Twd(t) => twd_unchecked(t, x, y),
            DistanceKind::TotalVariation => {
                check_len(x.len(), y.len())?;
                Ok(half_l1(x, y))
            }
            DistanceKind::Cosine => Ok(T::one() - cosine_similarity(x, y)?),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DistanceKind::Twd(_) => "twd",
            DistanceKind::TotalVariation => "tv",
            DistanceKind::Cosine => "cosine",
        }
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), DistanceError> {
    if expected != got {
        return Err(DistanceError::Dimension { expected, got });
    }
    Ok(())
}

fn check_simplex<T: Scalar>(a: &[T]) -> Result<(), DistanceError> {
    let sum: T = a.iter().copied().sum();
    let min = a.iter().fold(T::infinity(), |m, &v| m.min(v));
    if min < T::zero() || (sum - T::one()).abs() > T::simplex_tol() || !sum.is_finite() {
        return Err(DistanceError::NotSimplex {
            sum: sum.as_f64(),
            min: min.as_f64(),
        });
    }
    Ok(())
}

fn half_l1<T: Scalar>(a: &[T], b: &[T]) -> T {
    let s: T = a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum();
    s * T::lit(0.5)
}

/// `Σᵢ wᵢ |Σⱼ Bᵢⱼ (aⱼ − a'ⱼ)|` without simplex checks.
pub fn twd_unchecked<T: Scalar>(t: &TreeTopology<T>, a: &[T], b: &[T]) -> Result<T, DistanceError> {
    check_len(t.n_leaves(), a.len())?;
    check_len(t.n_leaves(), b.len())?;
    let diff: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let w = t.weights();
    let mut total = T::zero();
    for node in 0..t.n_nodes() {
        let mut mass = T::zero();
        for (j, &d) in diff.iter().enumerate() {
            if t.b(node, j) {
                mass += d;
            }
        }
        total += w[node] * mass.abs();
    }
    Ok(total)
}

/// Tree-Wasserstein distance `‖diag(w)Ba − diag(w)Ba'‖₁`.
pub fn twd<T: Scalar>(t: &TreeTopology<T>, a: &[T], b: &[T]) -> Result<T, DistanceError> {
    check_simplex(a)?;
    check_simplex(b)?;
    twd_unchecked(t, a, b)
}

/// `½‖a − a'‖₁`.
pub fn total_variation<T: Scalar>(a: &[T], b: &[T]) -> Result<T, DistanceError> {
    check_len(a.len(), b.len())?;
    Ok(half_l1(a, b))
}

/// Robust TWD: the maximum over unit-path edge weights of the transport
/// cost collapses to total variation for any tree, so only the leaf count
/// of `t` matters. `ot::rtwd_bruteforce` solves the max-min directly.
pub fn rtwd<T: Scalar>(t: &TreeTopology<T>, a: &[T], b: &[T]) -> Result<T, DistanceError> {
    check_len(t.n_leaves(), a.len())?;
    check_len(t.n_leaves(), b.len())?;
    Ok(half_l1(a, b))
}

/// `KL(p‖q)` for strictly positive inputs.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> T {
    p.iter()
        .zip(q)
        .map(|(&x, &y)| if x > T::zero() { x * (x.ln() - y.ln()) } else { T::zero() })
        .sum()
}

/// `(p + eps) / (1 + n·eps)`.
pub fn smooth<T: Scalar>(p: &[T], eps: T) -> Vec<T> {
    let denom = T::one() + T::from_usize_lossy(p.len()) * eps;
    p.iter().map(|&v| (v + eps) / denom).collect()
}

/// Symmetrized KL between smoothed vectors: `Σ (p − q)(ln p − ln q)`.
pub fn jeffrey_leaf<T: Scalar>(p: &[T], q: &[T], eps: T) -> Result<T, DistanceError> {
    check_len(p.len(), q.len())?;
    if eps <= T::zero() {
        return Err(DistanceError::Smoothing);
    }
    let (ps, qs) = (smooth(p, eps), smooth(q, eps));
    Ok(ps
        .iter()
        .zip(&qs)
        .map(|(&x, &y)| (x - y) * (x.ln() - y.ln()))
        .sum())
}

/// Jeffrey divergence between tree embeddings `diag(w)Ba` and `diag(w)Ba'`.
///
/// Requires `Bᵀw = 1`, under which the embeddings are probability vectors
/// and the divergence upper-bounds the squared TWD.
pub fn jeffrey_divergence<T: Scalar>(
    t: &TreeTopology<T>,
    a: &[T],
    b: &[T],
    eps: T,
) -> Result<T, DistanceError> {
    check_len(t.n_leaves(), a.len())?;
    check_len(t.n_leaves(), b.len())?;
    for (leaf, s) in t.path_weights().into_iter().enumerate() {
        if (s - T::one()).abs() > T::simplex_tol() {
            return Err(DistanceError::PathWeight {
                leaf,
                path_weight: s.as_f64(),
            });
        }
    }
    let p = t.embed(a).expect("length checked");
    let q = t.embed(b).expect("length checked");
    jeffrey_leaf(&p, &q, eps)
}

pub fn cosine_similarity<T: Scalar>(x: &[T], y: &[T]) -> Result<T, DistanceError> {
    check_len(x.len(), y.len())?;
    let nx = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    let ny = y.iter().map(|&v| v * v).sum::<T>().sqrt();
    if nx == T::zero() || ny == T::zero() {
        return Err(DistanceError::ZeroVector);
    }
    let dot: T = x.iter().zip(y).map(|(&p, &q)| p * q).sum();
    Ok((dot / (nx * ny)).max(-T::one()).min(T::one()))
}

/// Tape forms over batches (one probability vector per row).
pub mod tape {
    use crate::linalg::{DiffGraph, NodeId, Tensor};
    use crate::scalar::Scalar;
    use crate::tree::TreeTopology;

    /// `a ↦ a · (diag(w)B)ᵀ`, row by row.
    pub fn embed<T: Scalar>(g: &mut DiffGraph<T>, t: &TreeTopology<T>, a: NodeId) -> NodeId {
        let m = Tensor::matrix(t.n_leaves(), t.n_nodes(), t.embedding_matrix_t()).expect("sized");
        let m = g.leaf(m);
        g.matmul(a, m)
    }

    /// TWD between row `i` of `a` and row `i` of `b`, as a length-`R` vector.
    pub fn twd_rows<T: Scalar>(
        g: &mut DiffGraph<T>,
        t: &TreeTopology<T>,
        a: NodeId,
        b: NodeId,
    ) -> NodeId {
        let (ea, eb) = (embed(g, t, a), embed(g, t, b));
        let d = g.sub(ea, eb);
        let d = g.abs(d);
        g.sum_rows(d)
    }

    /// TWD between every row of `a` and every row of `b` (`R × S`).
    pub fn twd_pairwise<T: Scalar>(
        g: &mut DiffGraph<T>,
        t: &TreeTopology<T>,
        a: NodeId,
        b: NodeId,
    ) -> NodeId {
        let (ea, eb) = (embed(g, t, a), embed(g, t, b));
        g.pairwise_l1(ea, eb)
    }

    /// Row-wise Jeffrey divergence of `width`-column probability rows,
    /// smoothed as in [`super::smooth`].
    pub fn jeffrey_rows<T: Scalar>(
        g: &mut DiffGraph<T>,
        p: NodeId,
        q: NodeId,
        width: usize,
        eps: T,
    ) -> NodeId {
        let denom = T::one() / (T::one() + T::from_usize_lossy(width) * eps);
        let smooth = |g: &mut DiffGraph<T>, x: NodeId| {
            let s = g.add_scalar(x, eps);
            g.scale(s, denom)
        };
        let (ps, qs) = (smooth(g, p), smooth(g, q));
        let diff = g.sub(ps, qs);
        let (lp, lq) = (g.log(ps), g.log(qs));
        let ldiff = g.sub(lp, lq);
        let prod = g.mul(diff, ldiff);
        g.sum_rows(prod)
    }

    /// Row-wise cosine similarity of paired rows.
    pub fn cosine_rows<T: Scalar>(g: &mut DiffGraph<T>, a: NodeId, b: NodeId) -> NodeId {
        let (na, nb) = (g.l2_normalize(a), g.l2_normalize(b));
        let prod = g.mul(na, nb);
        g.sum_rows(prod)
    }

    /// Cosine similarity between every row of `a` and every row of `b`.
    pub fn cosine_pairwise<T: Scalar>(g: &mut DiffGraph<T>, a: NodeId, b: NodeId) -> NodeId {
        let (na, nb) = (g.l2_normalize(a), g.l2_normalize(b));
        let nbt = g.transpose(nb);
        g.matmul(na, nbt)
    }
}
