//! Entropy-regularized transport by log-domain Sinkhorn scaling.

use thiserror::Error;

use super::{check_instance, OtError, TransportPlan};
use crate::scalar::Scalar;

/// Mass added to every marginal bin before renormalizing.
pub const MARGINAL_SMOOTHING: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SinkhornError {
    #[error(transparent)]
    Instance(#[from] OtError),
    #[error("regularization must be positive, got {0}")]
    Lambda(f64),
    #[error("no convergence after {iterations} iterations (marginal residual {residual})")]
    NotConverged { iterations: usize, residual: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult<T> {
    /// `value` is the plain transport cost `Σ πᵢⱼ Cᵢⱼ`, entropy excluded.
    pub plan: TransportPlan<T>,
    pub iterations: usize,
    /// `‖Π1 − a‖₁` after each full row/column sweep.
    pub residuals: Vec<T>,
}

fn logsumexp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let max = xs.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + xs.map(|v| (v - max).exp()).sum::<T>().ln()
}

/// Minimizes `Σ πᵢⱼ Cᵢⱼ + λ Σ πᵢⱼ (ln πᵢⱼ − 1)` over couplings of `a`, `b`.
///
/// Potentials are kept in log form so that `λ` far below the cost scale
/// does not underflow the Gibbs kernel.
pub fn sinkhorn<T: Scalar>(
    cost: &[Vec<T>],
    a: &[T],
    b: &[T],
    lambda: T,
    max_iter: usize,
    tol: T,
) -> Result<SinkhornResult<T>, SinkhornError> {
    check_instance(cost, a, b)?;
    if lambda <= T::zero() || !lambda.is_finite() {
        return Err(SinkhornError::Lambda(lambda.as_f64()));
    }
    let eps = T::lit(MARGINAL_SMOOTHING);
    let smooth = |m: &[T]| {
        let denom = T::one() + T::from_usize_lossy(m.len()) * eps;
        m.iter().map(|&v| (v + eps) / denom).collect::<Vec<T>>()
    };
    let (a_s, b_s) = (smooth(a), smooth(b));
    let log_a: Vec<T> = a_s.iter().map(|v| v.ln()).collect();
    let log_b: Vec<T> = b_s.iter().map(|v| v.ln()).collect();
    let (n, m) = (a.len(), b.len());

    let mut f = vec![T::zero(); n];
    let mut g = vec![T::zero(); m];
    let mut residuals = Vec::new();
    let log_plan = |f: &[T], g: &[T], i: usize, j: usize| (f[i] + g[j] - cost[i][j]) / lambda;

    for it in 1..=max_iter {
        for i in 0..n {
            let lse = logsumexp((0..m).map(|j| (g[j] - cost[i][j]) / lambda));
            f[i] = lambda * (log_a[i] - lse);
        }
        for j in 0..m {
            let lse = logsumexp((0..n).map(|i| (f[i] - cost[i][j]) / lambda));
            g[j] = lambda * (log_b[j] - lse);
        }
        let residual: T = (0..n)
            .map(|i| {
                let row: T = (0..m).map(|j| log_plan(&f, &g, i, j).exp()).sum();
                (row - a_s[i]).abs()
            })
            .sum();
        residuals.push(residual);
        if residual <= tol {
            let plan: Vec<Vec<T>> = (0..n)
                .map(|i| (0..m).map(|j| log_plan(&f, &g, i, j).exp()).collect())
                .collect();
            let value = plan
                .iter()
                .zip(cost)
                .flat_map(|(p, c)| p.iter().zip(c).map(|(&x, &y)| x * y))
                .sum();
            return Ok(SinkhornResult {
                plan: TransportPlan { plan, value },
                iterations: it,
                residuals,
            });
        }
    }
    Err(SinkhornError::NotConverged {
        iterations: max_iter,
        residual: residuals.last().map_or(f64::NAN, |r| r.as_f64()),
    })
}
