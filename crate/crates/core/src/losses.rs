//! Self-supervised objectives over a batch of paired views.
//!
//! Inputs are tape nodes holding probability vectors, one sample per row;
//! row `i` of the first view and row `i` of the second view come from the
//! same source sample.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{DiffGraph, NodeId, Tensor, TensorError};
use crate::scalar::Scalar;
use crate::tree::{TreeError, TreeTopology};
use crate::twd::{tape, DistanceKind, JD_EPS};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_LAMBDA_JD: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("contrastive loss needs at least 2 samples per batch, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("target branch node {node} is not wrapped in a stop-gradient")]
    MissingStopGradient { node: NodeId },
    #[error("tree-embedded Jeffrey regularizer needs unit root-to-leaf weights")]
    JdMode,
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    InfonceTwd,
    SimsiamTwd,
    InfonceCosine,
    SimsiamCosine,
}

impl Objective {
    pub fn is_simsiam(self) -> bool {
        matches!(self, Objective::SimsiamTwd | Objective::SimsiamCosine)
    }

    pub fn uses_twd(self) -> bool {
        matches!(self, Objective::InfonceTwd | Objective::SimsiamTwd)
    }
}

/// Where the Jeffrey divergence is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JdMode {
    /// On `diag(w)Ba`; needs `Bᵀw = 1`.
    TreeEmbedded,
    /// On the probability vectors themselves.
    LeafSimplex,
}

impl JdMode {
    pub fn for_tree<T: Scalar>(t: &TreeTopology<T>) -> Self {
        if t.has_unit_paths(T::simplex_tol()) {
            JdMode::TreeEmbedded
        } else {
            JdMode::LeafSimplex
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchViews<T> {
    pub view1: Tensor<T>,
    pub view2: Tensor<T>,
}

impl<T: Scalar> BatchViews<T> {
    pub fn new(view1: Tensor<T>, view2: Tensor<T>) -> Result<Self, LossError> {
        if view1.shape() != view2.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "batch_views",
                lhs: view1.shape().to_vec(),
                rhs: view2.shape().to_vec(),
            }
            .into());
        }
        Ok(Self { view1, view2 })
    }

    pub fn r(&self) -> usize {
        self.view1.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig<T> {
    pub objective: Objective,
    pub tau: T,
    pub lambda_jd: T,
    pub distance: DistanceKind<T>,
}

impl<T: Scalar> LossConfig<T> {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > T::zero() && self.tau.is_finite()) {
            return Err(LossError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_jd >= T::zero() && self.lambda_jd.is_finite()) {
            return Err(LossError::Config(format!(
                "lambda_jd must be nonnegative, got {}",
                self.lambda_jd
            )));
        }
        if self.objective.uses_twd() && matches!(self.distance, DistanceKind::Cosine) {
            return Err(LossError::Config(
                "TWD objectives need a tree or total-variation distance".into(),
            ));
        }
        Ok(())
    }

    /// Tree realizing the configured distance on `n_leaves` bins.
    pub fn tree(&self, n_leaves: usize) -> Result<Cow<'_, TreeTopology<T>>, LossError> {
        match &self.distance {
            DistanceKind::Twd(t) if t.n_leaves() == n_leaves => Ok(Cow::Borrowed(t)),
            DistanceKind::Twd(t) => Err(LossError::Config(format!(
                "tree has {} leaves but heads emit {n_leaves} bins",
                t.n_leaves()
            ))),
            DistanceKind::TotalVariation | DistanceKind::Cosine => {
                Ok(Cow::Owned(TreeTopology::tv(n_leaves, T::lit(0.5))?))
            }
        }
    }
}

/// Mean Jeffrey divergence over paired rows of `a1`, `a2`.
pub fn jd_regularizer<T: Scalar>(
    g: &mut DiffGraph<T>,
    a1: NodeId,
    a2: NodeId,
    t: &TreeTopology<T>,
    mode: JdMode,
) -> Result<NodeId, LossError> {
    let eps = T::lit(JD_EPS);
    let rows = match mode {
        JdMode::TreeEmbedded => {
            if !t.has_unit_paths(T::simplex_tol()) {
                return Err(LossError::JdMode);
            }
            let (e1, e2) = (tape::embed(g, t, a1), tape::embed(g, t, a2));
            tape::jeffrey_rows(g, e1, e2, t.n_nodes(), eps)
        }
        JdMode::LeafSimplex => tape::jeffrey_rows(g, a1, a2, t.n_leaves(), eps),
    };
    Ok(g.mean(rows))
}

fn with_jd<T: Scalar>(
    g: &mut DiffGraph<T>,
    base: NodeId,
    pairs: &[(NodeId, NodeId)],
    t: &TreeTopology<T>,
    lambda_jd: T,
) -> Result<NodeId, LossError> {
    if lambda_jd == T::zero() {
        return Ok(base);
    }
    let mode = JdMode::for_tree(t);
    let share = lambda_jd / T::from_usize_lossy(pairs.len());
    let mut total = base;
    for &(p, q) in pairs {
        let jd = jd_regularizer(g, p, q, t, mode)?;
        let jd = g.scale(jd, share);
        total = g.add(total, jd);
    }
    Ok(total)
}

/// Anchor `i` (view 1) may not contrast with either view of sample `i`.
fn negative_mask(r: usize) -> Vec<bool> {
    let mut mask = vec![true; r * 2 * r];
    for i in 0..r {
        mask[i * 2 * r + i] = false;
        mask[i * 2 * r + r + i] = false;
    }
    mask
}

/// `mean_i [ W(a1ᵢ, a2ᵢ)/τ + log Σ_{k ∈ Nᵢ} exp(−W(a1ᵢ, cₖ)/τ) ] + λ·mean_i JD(a1ᵢ, a2ᵢ)`
/// where `c` stacks both views and `Nᵢ` drops both views of sample `i`.
pub fn infonce_twd_loss<T: Scalar>(
    g: &mut DiffGraph<T>,
    a1: NodeId,
    a2: NodeId,
    r: usize,
    t: &TreeTopology<T>,
    tau: T,
    lambda_jd: T,
) -> Result<NodeId, LossError> {
    if r < 2 {
        return Err(LossError::BatchTooSmall(r));
    }
    let all = g.concat_rows(a1, a2);
    let d = tape::twd_pairwise(g, t, a1, all);
    let pos = tape::twd_rows(g, t, a1, a2);
    let logits = g.scale(d, -T::one() / tau);
    let lse = g.masked_logsumexp(logits, negative_mask(r));
    let pos = g.scale(pos, T::one() / tau);
    let per_anchor = g.add(pos, lse);
    let base = g.mean(per_anchor);
    with_jd(g, base, &[(a1, a2)], t, lambda_jd)
}

fn require_stop_gradient<T: Scalar>(g: &DiffGraph<T>, node: NodeId) -> Result<(), LossError> {
    g.stop_gradient_mark(node)
        .map(|_| ())
        .ok_or(LossError::MissingStopGradient { node })
}

/// `½·mean W(p1ᵢ, z̄2ᵢ) + ½·mean W(z̄1ᵢ, p2ᵢ)` plus `λ` times the matching
/// Jeffrey terms. `online` holds predictor outputs, `target` the
/// stop-gradient branch.
pub fn simsiam_twd_loss<T: Scalar>(
    g: &mut DiffGraph<T>,
    online: (NodeId, NodeId),
    target: (NodeId, NodeId),
    t: &TreeTopology<T>,
    lambda_jd: T,
) -> Result<NodeId, LossError> {
    require_stop_gradient(g, target.0)?;
    require_stop_gradient(g, target.1)?;
    let half = T::lit(0.5);
    let d12 = tape::twd_rows(g, t, online.0, target.1);
    let d21 = tape::twd_rows(g, t, target.0, online.1);
    let (m12, m21) = (g.mean(d12), g.mean(d21));
    let sum = g.add(m12, m21);
    let base = g.scale(sum, half);
    with_jd(g, base, &[(online.0, target.1), (target.0, online.1)], t, lambda_jd)
}

/// InfoNCE with cosine similarity in place of the negative distance.
pub fn infonce_cosine_loss<T: Scalar>(
    g: &mut DiffGraph<T>,
    z1: NodeId,
    z2: NodeId,
    r: usize,
    tau: T,
) -> Result<NodeId, LossError> {
    if r < 2 {
        return Err(LossError::BatchTooSmall(r));
    }
    let all = g.concat_rows(z1, z2);
    let sim = tape::cosine_pairwise(g, z1, all);
    let logits = g.scale(sim, T::one() / tau);
    let lse = g.masked_logsumexp(logits, negative_mask(r));
    let pos = tape::cosine_rows(g, z1, z2);
    let pos = g.scale(pos, -T::one() / tau);
    let per_anchor = g.add(pos, lse);
    Ok(g.mean(per_anchor))
}

/// `−½·mean cos(p1ᵢ, z̄2ᵢ) − ½·mean cos(z̄1ᵢ, p2ᵢ)`.
pub fn simsiam_cosine_loss<T: Scalar>(
    g: &mut DiffGraph<T>,
    online: (NodeId, NodeId),
    target: (NodeId, NodeId),
) -> Result<NodeId, LossError> {
    require_stop_gradient(g, target.0)?;
    require_stop_gradient(g, target.1)?;
    let c12 = tape::cosine_rows(g, online.0, target.1);
    let c21 = tape::cosine_rows(g, target.0, online.1);
    let (m12, m21) = (g.mean(c12), g.mean(c21));
    let sum = g.add(m12, m21);
    Ok(g.scale(sum, T::lit(-0.5)))
}

/// Mode-collapse diagnostics over a batch of probability rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseMetrics {
    pub mean_pairwise_twd: f64,
    pub per_dim_std: Vec<f64>,
    /// Mean Shannon entropy of the rows (nats).
    pub entropy: f64,
}

impl CollapseMetrics {
    pub fn mean_std(&self) -> f64 {
        if self.per_dim_std.is_empty() {
            return 0.0;
        }
        self.per_dim_std.iter().sum::<f64>() / self.per_dim_std.len() as f64
    }
}

pub fn collapse_metrics<T: Scalar>(
    rows: &Tensor<T>,
    t: &TreeTopology<T>,
) -> Result<CollapseMetrics, LossError> {
    let n = rows.rows();
    if n < 2 {
        return Err(LossError::BatchTooSmall(n));
    }
    let emb: Vec<Vec<T>> = (0..n)
        .map(|i| t.embed(rows.row(i)))
        .collect::<Result<_, _>>()?;
    let mut total = T::zero();
    for i in 0..n {
        for j in i + 1..n {
            total += emb[i]
                .iter()
                .zip(&emb[j])
                .map(|(&x, &y)| (x - y).abs())
                .sum::<T>();
        }
    }
    let pairs = T::from_usize_lossy(n * (n - 1) / 2);
    let d = rows.cols();
    let nf = T::from_usize_lossy(n);
    let per_dim_std = (0..d)
        .map(|j| {
            let mean = (0..n).map(|i| rows.get(i, j)).sum::<T>() / nf;
            let var = (0..n).map(|i| (rows.get(i, j) - mean).powi(2)).sum::<T>() / nf;
            var.sqrt().as_f64()
        })
        .collect();
    let entropy = (0..n)
        .map(|i| {
            rows.row(i)
                .iter()
                .filter(|&&p| p > T::zero())
                .map(|&p| -p * p.ln())
                .sum::<T>()
        })
        .sum::<T>()
        / nf;
    Ok(CollapseMetrics {
        mean_pairwise_twd: (total / pairs).as_f64(),
        per_dim_std,
        entropy: entropy.as_f64(),
    })
}
