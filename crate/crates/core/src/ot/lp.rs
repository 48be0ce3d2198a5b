//! Dense two-phase primal simplex with Bland's rule.
//!
//! Solves `min cᵀx  s.t.  A x = b,  x ≥ l`. Problems here are small
//! (at most a few thousand columns), so a full tableau is kept and every
//! pivot touches it entirely. Bland's smallest-index rule makes the pivot
//! sequence deterministic and excludes cycling; the pivot cap only guards
//! against numerical trouble.

use thiserror::Error;

use crate::scalar::Scalar;

/// Largest number of variables accepted.
pub const MAX_VARIABLES: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("inconsistent problem dimensions: {0}")]
    Dimension(String),
    #[error("problem has {0} variables, above the cap of {MAX_VARIABLES}")]
    TooLarge(usize),
    #[error("infeasible: phase-one objective {residual}")]
    Infeasible { residual: f64 },
    #[error("unbounded along column {column}")]
    Unbounded { column: usize },
    #[error("pivot cap of {pivots} reached without optimality")]
    PivotCap { pivots: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem<T> {
    pub objective: Vec<T>,
    /// Equality constraint rows, each of length `objective.len()`.
    pub a_eq: Vec<Vec<T>>,
    pub b_eq: Vec<T>,
    /// Lower bound per variable.
    pub lower: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution<T> {
    pub x: Vec<T>,
    pub objective: T,
    pub pivots: usize,
    /// `‖A x − b‖∞` at the returned point.
    pub primal_residual: T,
}

impl<T: Scalar> LpProblem<T> {
    /// Nonnegative variables.
    pub fn standard(objective: Vec<T>, a_eq: Vec<Vec<T>>, b_eq: Vec<T>) -> Self {
        let n = objective.len();
        Self {
            objective,
            a_eq,
            b_eq,
            lower: vec![T::zero(); n],
        }
    }

    fn check(&self) -> Result<(), LpError> {
        let n = self.objective.len();
        if n > MAX_VARIABLES {
            return Err(LpError::TooLarge(n));
        }
        if self.lower.len() != n {
            return Err(LpError::Dimension(format!(
                "{} lower bounds for {n} variables",
                self.lower.len()
            )));
        }
        if self.a_eq.len() != self.b_eq.len() {
            return Err(LpError::Dimension(format!(
                "{} constraint rows but {} right-hand sides",
                self.a_eq.len(),
                self.b_eq.len()
            )));
        }
        if let Some((i, r)) = self.a_eq.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(LpError::Dimension(format!(
                "row {i} has {} entries, expected {n}",
                r.len()
            )));
        }
        Ok(())
    }
}

struct Tableau<T> {
    /// `rows × width`, last column is the right-hand side.
    cells: Vec<T>,
    rows: usize,
    width: usize,
    basis: Vec<usize>,
    /// Reduced cost row (length `width`, last entry = −objective).
    cost: Vec<T>,
    pivots: usize,
    max_pivots: usize,
    tol: T,
}

impl<T: Scalar> Tableau<T> {
    #[inline]
    fn at(&self, r: usize, c: usize) -> T {
        self.cells[r * self.width + c]
    }

    fn rhs(&self, r: usize) -> T {
        self.at(r, self.width - 1)
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let w = self.width;
        let p = self.at(row, col);
        for c in 0..w {
            self.cells[row * w + c] = self.cells[row * w + c] / p;
        }
        self.cells[row * w + col] = T::one();
        let pivot_row: Vec<T> = self.cells[row * w..(row + 1) * w].to_vec();
        for r in 0..self.rows {
            if r == row {
                continue;
            }
            let f = self.cells[r * w + col];
            if f == T::zero() {
                continue;
            }
            let dst = &mut self.cells[r * w..(r + 1) * w];
            for (d, &s) in dst.iter_mut().zip(&pivot_row) {
                *d -= f * s;
            }
            dst[col] = T::zero();
        }
        let f = self.cost[col];
        if f != T::zero() {
            for (d, &s) in self.cost.iter_mut().zip(&pivot_row) {
                *d -= f * s;
            }
            self.cost[col] = T::zero();
        }
        self.basis[row] = col;
        self.pivots += 1;
    }

    /// Runs Bland-rule iterations over columns `0..n_cols`.
    fn optimize(&mut self, n_cols: usize) -> Result<(), LpError> {
        loop {
            if self.pivots >= self.max_pivots {
                return Err(LpError::PivotCap {
                    pivots: self.pivots,
                });
            }
            let Some(enter) = (0..n_cols).find(|&c| self.cost[c] < -self.tol) else {
                return Ok(());
            };
            let mut leave: Option<(usize, T)> = None;
            for r in 0..self.rows {
                let a = self.at(r, enter);
                if a > self.tol {
                    let ratio = self.rhs(r) / a;
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            let tie = (ratio - lratio).abs() <= self.tol;
                            if ratio < lratio - self.tol
                                || (tie && self.basis[r] < self.basis[lr])
                            {
                                Some((r, ratio))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            let Some((row, _)) = leave else {
                return Err(LpError::Unbounded { column: enter });
            };
            self.pivot(row, enter);
        }
    }

    fn set_cost(&mut self, c: &[T]) {
        // reduced costs c_j − c_Bᵀ B⁻¹ A_j for the current basis
        let w = self.width;
        self.cost = vec![T::zero(); w];
        self.cost[..c.len()].copy_from_slice(c);
        for r in 0..self.rows {
            let cb = c.get(self.basis[r]).copied().unwrap_or(T::zero());
            if cb == T::zero() {
                continue;
            }
            for col in 0..w {
                self.cost[col] -= cb * self.cells[r * w + col];
            }
        }
    }

    fn remove_row(&mut self, row: usize) {
        let w = self.width;
        self.cells.drain(row * w..(row + 1) * w);
        self.basis.remove(row);
        self.rows -= 1;
    }
}

/// Solves the problem to optimality.
pub fn lp_solve<T: Scalar>(p: &LpProblem<T>) -> Result<LpSolution<T>, LpError> {
    p.check()?;
    let n = p.objective.len();
    let m = p.a_eq.len();
    let tol = T::pivot_tol();

    // shift x = l + y, then make every right-hand side nonnegative
    let mut rows: Vec<Vec<T>> = p.a_eq.clone();
    let mut rhs: Vec<T> = p
        .a_eq
        .iter()
        .zip(&p.b_eq)
        .map(|(r, &b)| b - r.iter().zip(&p.lower).map(|(&a, &l)| a * l).sum::<T>())
        .collect();
    for (r, b) in rows.iter_mut().zip(rhs.iter_mut()) {
        if *b < T::zero() {
            r.iter_mut().for_each(|v| *v = -*v);
            *b = -*b;
        }
    }

    // columns: n structural, m artificial, rhs
    let width = n + m + 1;
    let mut cells = vec![T::zero(); m * width];
    for i in 0..m {
        cells[i * width..i * width + n].copy_from_slice(&rows[i]);
        cells[i * width + n + i] = T::one();
        cells[i * width + width - 1] = rhs[i];
    }
    let mut tab = Tableau {
        cells,
        rows: m,
        width,
        basis: (n..n + m).collect(),
        cost: Vec::new(),
        pivots: 0,
        max_pivots: 50 * (n + m) + 1000,
        tol,
    };

    let mut phase_one = vec![T::zero(); n + m];
    phase_one[n..].iter_mut().for_each(|v| *v = T::one());
    tab.set_cost(&phase_one);
    tab.optimize(n + m)?;

    let scale = T::one() + rhs.iter().fold(T::zero(), |s, &v| s + v.abs());
    let infeasibility = -tab.cost[width - 1];
    if infeasibility > T::lit(1e3) * tol * scale {
        return Err(LpError::Infeasible {
            residual: infeasibility.as_f64(),
        });
    }

    // drive artificials out of the basis; rows where that is impossible are redundant
    let mut r = 0;
    while r < tab.rows {
        if tab.basis[r] >= n {
            let col = (0..n).find(|&c| tab.at(r, c).abs() > tol);
            match col {
                Some(c) => {
                    tab.pivot(r, c);
                    r += 1;
                }
                None => tab.remove_row(r),
            }
        } else {
            r += 1;
        }
    }

    // drop artificial columns
    let new_width = n + 1;
    let mut cells = Vec::with_capacity(tab.rows * new_width);
    for r in 0..tab.rows {
        let row = &tab.cells[r * width..(r + 1) * width];
        cells.extend_from_slice(&row[..n]);
        cells.push(row[width - 1]);
    }
    tab.cells = cells;
    tab.width = new_width;
    tab.set_cost(&p.objective);
    tab.optimize(n)?;

    let mut y = vec![T::zero(); n];
    for r in 0..tab.rows {
        y[tab.basis[r]] = tab.rhs(r).max(T::zero());
    }
    let x: Vec<T> = y.iter().zip(&p.lower).map(|(&v, &l)| v + l).collect();
    let objective = x.iter().zip(&p.objective).map(|(&v, &c)| v * c).sum();
    let primal_residual = p
        .a_eq
        .iter()
        .zip(&p.b_eq)
        .map(|(row, &b)| (row.iter().zip(&x).map(|(&a, &v)| a * v).sum::<T>() - b).abs())
        .fold(T::zero(), T::max);
    Ok(LpSolution {
        x,
        objective,
        pivots: tab.pivots,
        primal_residual,
    })
}
