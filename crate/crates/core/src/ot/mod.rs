//! Ground-truth optimal-transport solvers used to check the closed forms.

pub mod lp;
pub mod sinkhorn;

use thiserror::Error;

pub use lp::{lp_solve, LpError, LpProblem, LpSolution};
pub use sinkhorn::{sinkhorn, SinkhornError, SinkhornResult};

use crate::scalar::Scalar;
use crate::tree::TreeTopology;

/// Largest transport instance (`n̄ · m̄`) the exact solver accepts.
pub const MAX_PLAN_ENTRIES: usize = lp::MAX_VARIABLES;

/// Largest node count `rtwd_bruteforce` accepts.
pub const MAX_RTWD_NODES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OtError {
    #[error("cost matrix is {rows}×{cols} but marginals have lengths {a}×{b}")]
    Shape {
        rows: usize,
        cols: usize,
        a: usize,
        b: usize,
    },
    #[error("marginal {which} is not a probability vector (sum {sum})")]
    Marginal { which: &'static str, sum: f64 },
    #[error("instance has {0} plan entries, above the cap of {MAX_PLAN_ENTRIES}")]
    TooLarge(usize),
    #[error("tree has {0} nodes, above the cap of {MAX_RTWD_NODES}")]
    TreeTooLarge(usize),
    #[error("cost entry ({row}, {col}) is negative or non-finite")]
    Cost { row: usize, col: usize },
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// Coupling with prescribed marginals and its transport cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan<T> {
    pub plan: Vec<Vec<T>>,
    pub value: T,
}

impl<T: Scalar> TransportPlan<T> {
    pub fn row_sums(&self) -> Vec<T> {
        self.plan.iter().map(|r| r.iter().copied().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<T> {
        let m = self.plan.first().map_or(0, Vec::len);
        (0..m).map(|j| self.plan.iter().map(|r| r[j]).sum()).collect()
    }

    /// Largest marginal violation `max(‖Π1 − a‖∞, ‖Πᵀ1 − b‖∞)`, or
    /// `None` when some entry is negative.
    pub fn marginal_error(&self, a: &[T], b: &[T]) -> Option<T> {
        if self.plan.iter().flatten().any(|&v| v < T::zero()) {
            return None;
        }
        let dev = |s: Vec<T>, t: &[T]| {
            s.iter()
                .zip(t)
                .fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()))
        };
        Some(dev(self.row_sums(), a).max(dev(self.col_sums(), b)))
    }
}

pub(crate) fn check_instance<T: Scalar>(cost: &[Vec<T>], a: &[T], b: &[T]) -> Result<(), OtError> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows != a.len() || cols != b.len() || cost.iter().any(|r| r.len() != cols) {
        return Err(OtError::Shape {
            rows,
            cols,
            a: a.len(),
            b: b.len(),
        });
    }
    for (which, m) in [("a", a), ("b", b)] {
        let sum: T = m.iter().copied().sum();
        if m.iter().any(|&v| v < T::zero() || !v.is_finite())
            || (sum - T::one()).abs() > T::simplex_tol()
        {
            return Err(OtError::Marginal {
                which,
                sum: sum.as_f64(),
            });
        }
    }
    for (row, r) in cost.iter().enumerate() {
        if let Some(col) = r.iter().position(|&c| c < T::zero() || !c.is_finite()) {
            return Err(OtError::Cost { row, col });
        }
    }
    Ok(())
}

/// Exact 1-Wasserstein value by solving the transportation LP.
pub fn solve_ot_exact<T: Scalar>(
    cost: &[Vec<T>],
    a: &[T],
    b: &[T],
) -> Result<TransportPlan<T>, OtError> {
    check_instance(cost, a, b)?;
    let (n, m) = (a.len(), b.len());
    if n * m > MAX_PLAN_ENTRIES {
        return Err(OtError::TooLarge(n * m));
    }
    let objective: Vec<T> = cost.iter().flatten().copied().collect();
    let mut a_eq = Vec::with_capacity(n + m);
    for i in 0..n {
        let mut row = vec![T::zero(); n * m];
        row[i * m..(i + 1) * m].iter_mut().for_each(|v| *v = T::one());
        a_eq.push(row);
    }
    for j in 0..m {
        let mut row = vec![T::zero(); n * m];
        for i in 0..n {
            row[i * m + j] = T::one();
        }
        a_eq.push(row);
    }
    let b_eq: Vec<T> = a.iter().chain(b).copied().collect();
    let sol = lp_solve(&LpProblem::standard(objective, a_eq, b_eq))?;
    let plan = sol.x.chunks(m).map(<[T]>::to_vec).collect();
    Ok(TransportPlan {
        plan,
        value: sol.objective,
    })
}

/// Robust TWD by brute force: maximizes `½ Σⱼ wⱼ |[B(a − a')]ⱼ|` over the
/// polytope `{w ≥ 0 : Bᵀw = 1}` with the simplex solver.
pub fn rtwd_bruteforce<T: Scalar>(t: &TreeTopology<T>, a: &[T], b: &[T]) -> Result<T, OtError> {
    let (n, m) = (t.n_nodes(), t.n_leaves());
    if n > MAX_RTWD_NODES {
        return Err(OtError::TreeTooLarge(n));
    }
    if a.len() != m || b.len() != m {
        return Err(OtError::Shape {
            rows: m,
            cols: m,
            a: a.len(),
            b: b.len(),
        });
    }
    let half = T::lit(0.5);
    let objective: Vec<T> = (0..n)
        .map(|i| {
            let mass: T = (0..m).filter(|&j| t.b(i, j)).map(|j| a[j] - b[j]).sum();
            -half * mass.abs()
        })
        .collect();
    let a_eq: Vec<Vec<T>> = (0..m)
        .map(|j| (0..n).map(|i| if t.b(i, j) { T::one() } else { T::zero() }).collect())
        .collect();
    let sol = lp_solve(&LpProblem::standard(objective, a_eq, vec![T::one(); m]))?;
    Ok(-sol.objective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::SimplexVector;
    use crate::twd::{total_variation, twd};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_source_sink() {
        let cost = vec![vec![0.0f64, 3.0], vec![3.0, 0.0]];
        let p = solve_ot_exact(&cost, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((p.value - 3.0).abs() < 1e-12);
        assert_eq!(p.plan, vec![vec![0.0, 1.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn identity_coupling_costs_nothing() {
        let cost = vec![
            vec![0.0f64, 1.0, 2.0],
            vec![1.0, 0.0, 1.0],
            vec![2.0, 1.0, 0.0],
        ];
        let a = [0.2, 0.5, 0.3];
        let p = solve_ot_exact(&cost, &a, &a).unwrap();
        assert!(p.value.abs() < 1e-12);
    }

    /// Cheapest basic feasible solution found by trying every 5-subset of
    /// the 9 cells of a 3×3 transportation problem as a basis.
    fn enumerate_vertices(cost: &[[f64; 3]; 3], a: &[f64; 3], b: &[f64; 3]) -> f64 {
        let mut rows: Vec<[f64; 10]> = Vec::new();
        for i in 0..3 {
            let mut r = [0.0; 10];
            for j in 0..3 {
                r[i * 3 + j] = 1.0;
            }
            r[9] = a[i];
            rows.push(r);
        }
        for j in 0..2 {
            let mut r = [0.0; 10];
            for i in 0..3 {
                r[i * 3 + j] = 1.0;
            }
            r[9] = b[j];
            rows.push(r);
        }
        let mut best = f64::INFINITY;
        for mask in 0u32..512 {
            if mask.count_ones() != 5 {
                continue;
            }
            let cols: Vec<usize> = (0..9).filter(|c| mask & (1 << c) != 0).collect();
            // Gauss-Jordan on the 5×5 system restricted to `cols`
            let mut m: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| cols.iter().map(|&c| r[c]).chain([r[9]]).collect())
                .collect();
            let mut singular = false;
            for k in 0..5 {
                let Some(p) = (k..5).max_by(|&x, &y| m[x][k].abs().total_cmp(&m[y][k].abs())) else {
                    singular = true;
                    break;
                };
                if m[p][k].abs() < 1e-12 {
                    singular = true;
                    break;
                }
                m.swap(k, p);
                let piv = m[k][k];
                m[k].iter_mut().for_each(|v| *v /= piv);
                for r in 0..5 {
                    if r != k {
                        let f = m[r][k];
                        for c in 0..6 {
                            m[r][c] -= f * m[k][c];
                        }
                    }
                }
            }
            if singular {
                continue;
            }
            let x: Vec<f64> = (0..5).map(|k| m[k][5]).collect();
            if x.iter().any(|&v| v < -1e-12) {
                continue;
            }
            let value: f64 = cols.iter().zip(&x).map(|(&c, &v)| cost[c / 3][c % 3] * v).sum();
            best = best.min(value);
        }
        best
    }

    #[test]
    fn matches_vertex_enumeration_on_integer_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut cost = [[0.0; 3]; 3];
            for row in cost.iter_mut() {
                for c in row.iter_mut() {
                    *c = f64::from(rng.random_range(0..10u8));
                }
            }
            let a = SimplexVector::<f64>::random(3, &mut rng);
            let b = SimplexVector::<f64>::random(3, &mut rng);
            let (a, b) = (
                [a.as_slice()[0], a.as_slice()[1], a.as_slice()[2]],
                [b.as_slice()[0], b.as_slice()[1], b.as_slice()[2]],
            );
            let oracle = enumerate_vertices(&cost, &a, &b);
            let c: Vec<Vec<f64>> = cost.iter().map(|r| r.to_vec()).collect();
            let got = solve_ot_exact(&c, &a, &b).unwrap();
            assert!((got.value - oracle).abs() < 1e-10, "{} vs {}", got.value, oracle);
            assert!(got.marginal_error(&a, &b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn matches_permutation_enumeration_for_uniform_marginals() {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = [1.0 / 3.0; 3];
        for _ in 0..30 {
            let c: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..3).map(|_| f64::from(rng.random_range(0..20u8))).collect())
                .collect();
            let best = perms
                .iter()
                .map(|p| (0..3).map(|i| c[i][p[i]]).sum::<f64>() / 3.0)
                .fold(f64::INFINITY, f64::min);
            let got = solve_ot_exact(&c, &u, &u).unwrap();
            assert!((got.value - best).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_matches_closed_form_on_cluster_tree() {
        let t = TreeTopology::<f64>::cluster(2, 2, 0.5, 0.5).unwrap();
        let d = t.shortest_path_matrix();
        let p = solve_ot_exact(&d, &[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((p.value - 2.0).abs() < 1e-12);
        let p = solve_ot_exact(&d, &[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((p.value - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = SimplexVector::<f64>::random(4, &mut rng);
            let b = SimplexVector::<f64>::random(4, &mut rng);
            let lp = solve_ot_exact(&d, a.as_slice(), b.as_slice()).unwrap().value;
            let cf = twd(&t, a.as_slice(), b.as_slice()).unwrap();
            assert!((lp - cf).abs() < 1e-9);
        }
    }

    #[test]
    fn chain_transport_over_distance_two() {
        let t = TreeTopology::<f64>::chain(3, &[1.0, 1.0]).unwrap();
        let p = solve_ot_exact(&t.shortest_path_matrix(), &[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
        assert!((p.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_instances() {
        let cost = vec![vec![0.0f64, 1.0], vec![1.0, 0.0]];
        assert!(matches!(
            solve_ot_exact(&cost, &[0.5, 0.6], &[0.5, 0.5]),
            Err(OtError::Marginal { which: "a", .. })
        ));
        assert!(matches!(
            solve_ot_exact(&cost, &[1.0], &[0.5, 0.5]),
            Err(OtError::Shape { .. })
        ));
        let n = 65;
        let big = vec![vec![0.0; n]; n];
        let u = vec![1.0 / n as f64; n];
        assert!(matches!(solve_ot_exact(&big, &u, &u), Err(OtError::TooLarge(_))));
    }

    #[test]
    fn rtwd_bruteforce_examples() {
        let tv = TreeTopology::<f64>::tv(4, 0.5).unwrap();
        let a = [0.1, 0.2, 0.3, 0.4];
        assert!(rtwd_bruteforce(&tv, &a, &a).unwrap().abs() < 1e-15);
        let b = [0.4, 0.3, 0.2, 0.1];
        let v = rtwd_bruteforce(&tv, &a, &b).unwrap();
        assert!((v - total_variation(&a, &b).unwrap()).abs() < 1e-12);

        let ct = TreeTopology::cluster(2, 3, 0.5, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let a = SimplexVector::<f64>::random(6, &mut rng);
            let b = SimplexVector::<f64>::random(6, &mut rng);
            let v = rtwd_bruteforce(&ct, a.as_slice(), b.as_slice()).unwrap();
            let tv = total_variation(a.as_slice(), b.as_slice()).unwrap();
            assert!((v - tv).abs() < 1e-7);
        }
    }
}
