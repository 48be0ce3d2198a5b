//! Maps from encoder outputs to probability vectors.
//!
//! Every head has a pure single-row form and a tape form operating on a
//! batch (one sample per row). ArcFace heads normalize their input first and
//! score it against the unit columns of a key matrix `K` (`d_out × d_prob`).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{softmax_in_place, DiffGraph, NodeId, Tensor};
use crate::scalar::Scalar;

/// Default ArcFace temperature.
pub const DEFAULT_ETA: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("invalid head configuration: {0}")]
    Config(String),
    #[error("expected {expected} entries, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("input vector has zero norm")]
    ZeroInput,
    #[error("positional-encoding keys need an even d_out, got {0}")]
    OddDimension(usize),
    #[error("key column {column} has norm {norm}")]
    NotUnitColumn { column: usize, norm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyKind {
    Learned,
    Pe,
    Dct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HeadKind {
    Softmax,
    Sem { l: usize, v: usize },
    ArcFace { key: KeyKind, eta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub d_out: usize,
    pub d_prob: usize,
}

impl HeadConfig {
    pub fn new(kind: HeadKind, d_out: usize) -> Result<Self, HeadError> {
        let cfg = Self {
            kind,
            d_out,
            d_prob: d_out,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        if self.d_out == 0 {
            return Err(HeadError::Config("d_out must be positive".into()));
        }
        if self.d_prob != self.d_out {
            return Err(HeadError::Config(format!(
                "d_prob ({}) must equal d_out ({})",
                self.d_prob, self.d_out
            )));
        }
        match self.kind {
            HeadKind::Softmax => Ok(()),
            HeadKind::Sem { l, v } => {
                if l == 0 || v == 0 || l * v != self.d_prob {
                    Err(HeadError::Config(format!(
                        "SEM needs L·V = d_prob, got {l}·{v} vs {}",
                        self.d_prob
                    )))
                } else {
                    Ok(())
                }
            }
            HeadKind::ArcFace { key, eta } => {
                if !(eta > 0.0 && eta.is_finite()) {
                    return Err(HeadError::Config(format!("eta must be positive, got {eta}")));
                }
                if key == KeyKind::Pe && self.d_out % 2 != 0 {
                    return Err(HeadError::OddDimension(self.d_out));
                }
                Ok(())
            }
        }
    }

    pub fn needs_key(&self) -> bool {
        matches!(self.kind, HeadKind::ArcFace { .. })
    }

    pub fn learned_key(&self) -> bool {
        matches!(
            self.kind,
            HeadKind::ArcFace {
                key: KeyKind::Learned,
                ..
            }
        )
    }

    /// Key matrix for ArcFace heads; `None` for the others.
    pub fn init_key<T: Scalar, R: Rng + ?Sized>(
        &self,
        rng: &mut R,
    ) -> Result<Option<KeyMatrix<T>>, HeadError> {
        let HeadKind::ArcFace { key, .. } = self.kind else {
            return Ok(None);
        };
        let k = match key {
            KeyKind::Learned => KeyMatrix::learned(self.d_out, self.d_prob, rng),
            KeyKind::Pe => pe_key_matrix(self.d_out, self.d_prob)?,
            KeyKind::Dct => dct_key_matrix(self.d_out),
        };
        Ok(Some(k))
    }

    pub fn label(&self) -> String {
        match self.kind {
            HeadKind::Softmax => "softmax".into(),
            HeadKind::Sem { l, v } => format!("sem(L={l},V={v})"),
            HeadKind::ArcFace { key, .. } => match key {
                KeyKind::Learned => "af".into(),
                KeyKind::Pe => "af(pe)".into(),
                KeyKind::Dct => "af(dct)".into(),
            },
        }
    }
}

/// `d_out × d_prob` matrix with unit-norm columns.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMatrix<T> {
    k: Tensor<T>,
}

impl<T: Scalar> KeyMatrix<T> {
    pub fn new(k: Tensor<T>) -> Result<Self, HeadError> {
        let m = Self { k };
        let tol = T::lit(1e-9);
        for (column, norm) in m.column_norms().into_iter().enumerate() {
            if (norm - T::one()).abs() > tol {
                return Err(HeadError::NotUnitColumn {
                    column,
                    norm: norm.as_f64(),
                });
            }
        }
        Ok(m)
    }

    /// Gaussian columns, normalized.
    pub fn learned<R: Rng + ?Sized>(d_out: usize, d_prob: usize, rng: &mut R) -> Self {
        let data = (0..d_out * d_prob)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::lit(v)
            })
            .collect();
        let mut k = Tensor::matrix(d_out, d_prob, data).expect("sized");
        normalize_columns(&mut k);
        Self { k }
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.k
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.k
    }

    pub fn d_out(&self) -> usize {
        self.k.rows()
    }

    pub fn d_prob(&self) -> usize {
        self.k.cols()
    }

    pub fn column_norms(&self) -> Vec<T> {
        column_norms(&self.k)
    }

    /// `‖KᵀK − I‖∞`.
    pub fn orthonormality_error(&self) -> T {
        let g = self.k.transpose().matmul(&self.k).expect("square gram");
        let mut worst = T::zero();
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let target = if i == j { T::one() } else { T::zero() };
                worst = worst.max((g.get(i, j) - target).abs());
            }
        }
        worst
    }
}

pub fn column_norms<T: Scalar>(k: &Tensor<T>) -> Vec<T> {
    let mut sq = vec![T::zero(); k.cols()];
    for r in 0..k.rows() {
        for (s, &v) in sq.iter_mut().zip(k.row(r)) {
            *s += v * v;
        }
    }
    sq.into_iter().map(T::sqrt).collect()
}

/// Rescales every nonzero column to unit L2 norm in place.
pub fn normalize_columns<T: Scalar>(k: &mut Tensor<T>) {
    let norms = column_norms(k);
    for r in 0..k.rows() {
        for (v, &n) in k.row_mut(r).iter_mut().zip(&norms) {
            if n > T::zero() {
                *v /= n;
            }
        }
    }
}

/// Sinusoidal keys: column `i` holds `sin(i/10000^(2j/d_out))` at row `2j`
/// and the matching cosine at row `2j+1`, then is normalized.
pub fn pe_key_matrix<T: Scalar>(d_out: usize, d_prob: usize) -> Result<KeyMatrix<T>, HeadError> {
    if d_out % 2 != 0 {
        return Err(HeadError::OddDimension(d_out));
    }
    let mut k = Tensor::zeros(&[d_out, d_prob]);
    for i in 0..d_prob {
        let pos = T::from_usize_lossy(i);
        for j in 0..d_out / 2 {
            let freq = T::lit(10000.0).powf(T::from_usize_lossy(2 * j) / T::from_usize_lossy(d_out));
            let angle = pos / freq;
            k.set(2 * j, i, angle.sin());
            k.set(2 * j + 1, i, angle.cos());
        }
    }
    normalize_columns(&mut k);
    Ok(KeyMatrix { k })
}

/// Orthonormal DCT-II basis; row `i` is frequency `i`.
pub fn dct_key_matrix<T: Scalar>(d: usize) -> KeyMatrix<T> {
    let n = T::from_usize_lossy(d);
    let mut k = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..d {
            let v = if i == 0 {
                T::one() / n.sqrt()
            } else {
                let arg = T::PI() * T::from_usize_lossy((2 * j + 1) * i) / (T::lit(2.0) * n);
                (T::lit(2.0) / n).sqrt() * arg.cos()
            };
            k.set(i, j, v);
        }
    }
    KeyMatrix { k }
}

pub fn softmax_head<T: Scalar>(f: &[T]) -> Vec<T> {
    let mut out = f.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn sem_head<T: Scalar>(f: &[T], l: usize, v: usize) -> Result<Vec<T>, HeadError> {
    if l == 0 || v == 0 || l * v != f.len() {
        return Err(HeadError::Dimension {
            expected: l * v,
            got: f.len(),
        });
    }
    let scale = T::one() / T::from_usize_lossy(l);
    let mut out = f.to_vec();
    for block in out.chunks_mut(v) {
        softmax_in_place(block);
        block.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(out)
}

pub fn arcface_head<T: Scalar>(f: &[T], k: &KeyMatrix<T>, eta: T) -> Result<Vec<T>, HeadError> {
    if f.len() != k.d_out() {
        return Err(HeadError::Dimension {
            expected: k.d_out(),
            got: f.len(),
        });
    }
    let norm = f.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm == T::zero() {
        return Err(HeadError::ZeroInput);
    }
    let mut logits = vec![T::zero(); k.d_prob()];
    for (r, &fr) in f.iter().enumerate() {
        let fr = fr / norm;
        for (l, &kv) in logits.iter_mut().zip(k.as_tensor().row(r)) {
            *l += fr * kv;
        }
    }
    logits.iter_mut().for_each(|l| *l /= eta);
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// Pure evaluation of any configured head on one row.
pub fn apply_head<T: Scalar>(
    cfg: &HeadConfig,
    f: &[T],
    key: Option<&KeyMatrix<T>>,
) -> Result<Vec<T>, HeadError> {
    match cfg.kind {
        HeadKind::Softmax => Ok(softmax_head(f)),
        HeadKind::Sem { l, v } => sem_head(f, l, v),
        HeadKind::ArcFace { eta, .. } => {
            let k = key.ok_or_else(|| HeadError::Config("ArcFace head without key matrix".into()))?;
            arcface_head(f, k, T::lit(eta))
        }
    }
}

/// Tape form of the head over a batch node `f` (`R × d_out`). `key` is the
/// node holding `K` and is required for ArcFace heads.
pub fn head_node<T: Scalar>(
    g: &mut DiffGraph<T>,
    cfg: &HeadConfig,
    f: NodeId,
    key: Option<NodeId>,
) -> Result<NodeId, HeadError> {
    Ok(match cfg.kind {
        HeadKind::Softmax => g.softmax(f),
        HeadKind::Sem { l, v } => {
            let s = g.block_softmax(f, v);
            g.scale(s, T::one() / T::from_usize_lossy(l))
        }
        HeadKind::ArcFace { eta, .. } => {
            let k = key.ok_or_else(|| HeadError::Config("ArcFace head without key node".into()))?;
            let n = g.l2_normalize(f);
            let logits = g.matmul(n, k);
            let logits = g.scale(logits, T::one() / T::lit(eta));
            g.softmax(logits)
        }
    })
}
