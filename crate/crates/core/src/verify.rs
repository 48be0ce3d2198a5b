//! Oracle sweeps behind `twassl verify`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::heads::dct_key_matrix;
use crate::linalg::{DiffError, DiffGraph, Tensor};
use crate::losses::{infonce_twd_loss, simsiam_twd_loss, LossError};
use crate::ot::{rtwd_bruteforce, sinkhorn, solve_ot_exact, OtError, SinkhornError};
use crate::tree::{SimplexVector, TreeError, TreeTopology};
use crate::twd::{jeffrey_divergence, kl_divergence, total_variation, twd, DistanceError, JD_EPS};

pub const LEAF_COUNTS: [usize; 4] = [2, 4, 8, 16];

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("unknown suite `{0}` (expected one of twd-lp, rtwd-tv, jd-bound, pinsker, sinkhorn, gradcheck, dct-orth, all)")]
    UnknownSuite(String),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Distance(#[from] DistanceError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Sinkhorn(#[from] SinkhornError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    TwdLp,
    RtwdTv,
    JdBound,
    Pinsker,
    Sinkhorn,
    GradCheck,
    DctOrth,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::TwdLp,
        Suite::RtwdTv,
        Suite::JdBound,
        Suite::Pinsker,
        Suite::Sinkhorn,
        Suite::GradCheck,
        Suite::DctOrth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::TwdLp => "twd-lp",
            Suite::RtwdTv => "rtwd-tv",
            Suite::JdBound => "jd-bound",
            Suite::Pinsker => "pinsker",
            Suite::Sinkhorn => "sinkhorn",
            Suite::GradCheck => "gradcheck",
            Suite::DctOrth => "dct-orth",
        }
    }

    /// Trial count used when the caller does not pick one.
    pub fn default_trials(self) -> usize {
        match self {
            Suite::JdBound | Suite::Pinsker => 1000,
            Suite::DctOrth => 1,
            _ => 100,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = VerifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| VerifyError::UnknownSuite(s.to_string()))
    }
}

/// One oracle comparison. `error` is compared against `tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub case: String,
    pub n: usize,
    pub trial: usize,
    pub value: f64,
    pub oracle: f64,
    pub error: f64,
    pub tolerance: f64,
}

impl SweepRow {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub suite: Suite,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn max_error(&self) -> f64 {
        self.rows.iter().map(|r| r.error).fold(0.0, f64::max)
    }

    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| !r.passed()).count()
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0
    }

    /// Largest error within each case, in first-seen order.
    pub fn case_maxima(&self) -> Vec<(String, f64, f64)> {
        let mut out: Vec<(String, f64, f64)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(c, _, _)| *c == r.case) {
                Some(entry) => entry.1 = entry.1.max(r.error),
                None => out.push((r.case.clone(), r.error, r.tolerance)),
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "{} {}: {} rows, max error {:.3e}, {} violations",
            self.suite,
            if self.passed() { "PASS" } else { "FAIL" },
            self.rows.len(),
            self.max_error(),
            self.violations()
        )
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), VerifyError> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Topologies exercised by the closed-form sweeps for a given leaf count.
pub fn sweep_topologies<R: Rng + ?Sized>(
    n: usize,
    rng: &mut R,
) -> Result<Vec<(&'static str, TreeTopology<f64>)>, TreeError> {
    let clusters = if n >= 4 { n / 2 } else { n };
    let gaps: Vec<f64> = (1..n).map(|_| rng.random_range(0.1..2.0)).collect();
    Ok(vec![
        ("tv", TreeTopology::tv(n, 0.5)?),
        ("cluster", TreeTopology::cluster(clusters, n / clusters, 0.5, 0.5)?),
        ("chain", TreeTopology::chain(n, &gaps)?),
    ])
}

/// Topologies with `Bᵀw = 1`, on which JD bounds the squared TWD.
pub fn unit_path_topologies(n: usize) -> Result<Vec<(&'static str, TreeTopology<f64>)>, TreeError> {
    let clusters = if n >= 4 { n / 2 } else { n };
    Ok(vec![
        ("tv", TreeTopology::tv(n, 1.0)?),
        ("cluster", TreeTopology::cluster(clusters, n / clusters, 0.5, 0.5)?),
    ])
}

fn simplex_pair<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    (
        SimplexVector::<f64>::random(n, rng).into_inner(),
        SimplexVector::<f64>::random(n, rng).into_inner(),
    )
}

fn row(case: &str, n: usize, trial: usize, value: f64, oracle: f64, tolerance: f64) -> SweepRow {
    SweepRow {
        case: case.to_string(),
        n,
        trial,
        value,
        oracle,
        error: (value - oracle).abs(),
        tolerance,
    }
}

pub fn run_suite(suite: Suite, trials: usize, seed: u64) -> Result<SweepReport, VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = match suite {
        Suite::TwdLp => twd_lp(trials, &mut rng)?,
        Suite::RtwdTv => rtwd_tv(trials, &mut rng)?,
        Suite::JdBound => jd_bound(trials, &mut rng)?,
        Suite::Pinsker => pinsker(trials, &mut rng),
        Suite::Sinkhorn => sinkhorn_sweep(trials, &mut rng)?,
        Suite::GradCheck => grad_sweep(trials, &mut rng)?,
        Suite::DctOrth => dct_orth(),
    };
    Ok(SweepReport { suite, seed, rows })
}

fn twd_lp(trials: usize, rng: &mut ChaCha8Rng) -> Result<Vec<SweepRow>, VerifyError> {
    let mut rows = Vec::new();
    for n in LEAF_COUNTS {
        for (name, t) in sweep_topologies(n, rng)? {
            let cost = t.shortest_path_matrix();
            for trial in 0..trials {
                let (a, b) = simplex_pair(n, rng);
                let closed = twd(&t, &a, &b)?;
                let lp = solve_ot_exact(&cost, &a, &b)?.value;
                rows.push(row(name, n, trial, closed, lp, 1e-9));
            }
        }
    }
    Ok(rows)
}

fn rtwd_tv(trials: usize, rng: &mut ChaCha8Rng) -> Result<Vec<SweepRow>, VerifyError> {
    let mut rows = Vec::new();
    for n in LEAF_COUNTS {
        for (name, t) in sweep_topologies(n, rng)? {
            for trial in 0..trials {
                let (a, b) = simplex_pair(n, rng);
                let brute = rtwd_bruteforce(&t, &a, &b)?;
                rows.push(row(name, n, trial, brute, total_variation(&a, &b)?, 1e-7));
            }
        }
    }
    Ok(rows)
}

/// `error` is the excess `W² − JD`, so any positive value is a violation.
fn jd_bound(trials: usize, rng: &mut ChaCha8Rng) -> Result<Vec<SweepRow>, VerifyError> {
    let mut rows = Vec::new();
    for n in LEAF_COUNTS {
        for (name, t) in unit_path_topologies(n)? {
            for trial in 0..trials {
                let (a, b) = simplex_pair(n, rng);
                let w = twd(&t, &a, &b)?;
                let jd = jeffrey_divergence(&t, &a, &b, JD_EPS)?;
                rows.push(SweepRow {
                    case: name.to_string(),
                    n,
                    trial,
                    value: w * w,
                    oracle: jd,
                    error: (w * w - jd).max(0.0),
                    tolerance: 0.0,
                });
            }
        }
    }
    Ok(rows)
}

/// `‖p − q‖₁ ≤ √(2 KL(p‖q))`, with the excess as the error.
fn pinsker(trials: usize, rng: &mut ChaCha8Rng) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for n in LEAF_COUNTS {
        for trial in 0..trials {
            let (p, q) = simplex_pair(n, rng);
            let l1: f64 = p.iter().zip(&q).map(|(x, y)| (x - y).abs()).sum();
            let bound = (2.0 * kl_divergence(&p, &q)).sqrt();
            rows.push(SweepRow {
                case: "kl".to_string(),
                n,
                trial,
                value: l1,
                oracle: bound,
                error: (l1 - bound).max(0.0),
                tolerance: 0.0,
            });
        }
    }
    rows
}

pub const SINKHORN_POINTS: usize = 8;

/// Random Euclidean instance: points uniform in the unit square, flat
/// Dirichlet marginals.
pub fn sinkhorn_instance<R: Rng + ?Sized>(rng: &mut R) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let n = SINKHORN_POINTS;
    let mut pts = |_| -> Vec<(f64, f64)> {
        (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect()
    };
    let (xs, ys) = (pts(0), pts(1));
    let cost = xs
        .iter()
        .map(|&(x0, x1)| ys.iter().map(|&(y0, y1)| (x0 - y0).hypot(x1 - y1)).collect())
        .collect();
    let (a, b) = simplex_pair(n, rng);
    (cost, a, b)
}

fn sinkhorn_sweep(trials: usize, rng: &mut ChaCha8Rng) -> Result<Vec<SweepRow>, VerifyError> {
    let n = SINKHORN_POINTS;
    let mut rows = Vec::new();
    for trial in 0..trials {
        let (cost, a, b) = sinkhorn_instance(rng);
        let mean_cost = cost.iter().flatten().sum::<f64>() / (n * n) as f64;
        let exact = solve_ot_exact(&cost, &a, &b)?.value;
        let res = sinkhorn(&cost, &a, &b, 0.01 * mean_cost, 100_000, 1e-10)?;
        let v = res.plan.value;
        rows.push(SweepRow {
            case: "relative-gap".to_string(),
            n,
            trial,
            value: v,
            oracle: exact,
            error: (v - exact).abs() / exact.abs().max(f64::MIN_POSITIVE),
            tolerance: 0.01,
        });
        let marginal = res.plan.marginal_error(&a, &b).unwrap_or(f64::INFINITY);
        rows.push(SweepRow {
            case: "marginal".to_string(),
            n,
            trial,
            value: marginal,
            oracle: 0.0,
            error: marginal,
            tolerance: 1e-6,
        });
    }
    Ok(rows)
}

const GRAD_BATCH: usize = 4;
const GRAD_WIDTH: usize = 4;
const GRAD_STEP: f64 = 1e-6;

fn random_logits(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..GRAD_BATCH * GRAD_WIDTH).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::matrix(GRAD_BATCH, GRAD_WIDTH, data).expect("shape")
}

/// Gradient checks of both TWD objectives with respect to pre-softmax
/// logits, plus the exact-zero adjoint on the stop-gradient branch.
fn grad_sweep(trials: usize, rng: &mut ChaCha8Rng) -> Result<Vec<SweepRow>, VerifyError> {
    let t = TreeTopology::cluster(2, 2, 0.5, 0.5)?;
    let mut rows = Vec::new();
    for trial in 0..trials {
        let mut g = DiffGraph::new();
        let (x1, x2) = (g.leaf(random_logits(rng)), g.leaf(random_logits(rng)));
        let (a1, a2) = (g.softmax(x1), g.softmax(x2));
        let loss = infonce_twd_loss(&mut g, a1, a2, GRAD_BATCH, &t, 0.07, 0.1)?;
        let e1 = g.grad_check(loss, x1, GRAD_STEP)?;
        let e2 = g.grad_check(loss, x2, GRAD_STEP)?;
        rows.push(SweepRow {
            case: "infonce-twd-jd".to_string(),
            n: GRAD_WIDTH,
            trial,
            value: e1.max(e2),
            oracle: 0.0,
            error: e1.max(e2),
            tolerance: 1e-4,
        });

        let mut g = DiffGraph::new();
        let on: Vec<_> = (0..2).map(|_| g.leaf(random_logits(rng))).collect();
        let tg: Vec<_> = (0..2).map(|_| g.leaf(random_logits(rng))).collect();
        let p: Vec<_> = on.iter().map(|&x| g.softmax(x)).collect();
        let z: Vec<_> = tg
            .iter()
            .map(|&x| {
                let s = g.softmax(x);
                g.stop_grad(s)
            })
            .collect();
        let loss = simsiam_twd_loss(&mut g, (p[0], p[1]), (z[0], z[1]), &t, 0.1)?;
        let e = g.grad_check(loss, on[0], GRAD_STEP)?.max(g.grad_check(loss, on[1], GRAD_STEP)?);
        rows.push(SweepRow {
            case: "simsiam-twd-jd".to_string(),
            n: GRAD_WIDTH,
            trial,
            value: e,
            oracle: 0.0,
            error: e,
            tolerance: 1e-4,
        });
        let grads = g.backward(loss)?;
        let leak = tg
            .iter()
            .flat_map(|&x| grads.get(x).into_data())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        rows.push(SweepRow {
            case: "stop-gradient-adjoint".to_string(),
            n: GRAD_WIDTH,
            trial,
            value: leak,
            oracle: 0.0,
            error: leak,
            tolerance: 0.0,
        });
    }
    Ok(rows)
}

fn dct_orth() -> Vec<SweepRow> {
    (2..=64)
        .map(|d| {
            let e: f64 = dct_key_matrix::<f64>(d).orthonormality_error();
            row("dct", d, 0, e, 0.0, 1e-10)
        })
        .collect()
}
