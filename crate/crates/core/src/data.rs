//! Synthetic class-structured data, two-view augmentation and KNN evaluation.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Tensor;
use crate::scalar::Scalar;
use crate::seeds::{stream_rng, Stream};
use crate::twd::{DistanceError, DistanceKind};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset specification: {0}")]
    Spec(String),
    #[error("training set is empty")]
    EmptyTrain,
    #[error("K = {k} but only {n} training rows")]
    TooFewNeighbours { k: usize, n: usize },
    #[error("{rows} rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("embedding widths differ: train {train}, test {test}")]
    Width { train: usize, test: usize },
    #[error(transparent)]
    Distance(#[from] DistanceError),
    #[error("csv {path}, line {line}: {message}")]
    Csv {
        path: String,
        line: u64,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    /// Standard deviation of the additive Gaussian noise.
    pub sigma: f64,
    /// Probability that a feature is zeroed.
    pub dropout: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub d_in: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Distance of every class center from the origin.
    pub center_scale: f64,
    /// Per-feature standard deviation around the center.
    pub noise: f64,
    pub augment: AugmentSpec,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            d_in: 32,
            train_per_class: 500,
            test_per_class: 200,
            center_scale: 3.0,
            noise: 1.0,
            augment: AugmentSpec::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let counts = [
            ("n_classes", self.n_classes),
            ("d_in", self.d_in),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(DataError::Spec(format!("{name} must be positive")));
        }
        for (name, v) in [("center_scale", self.center_scale), ("noise", self.noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DataError::Spec(format!("{name} must be nonnegative, got {v}")));
            }
        }
        self.augment.validate()
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(DataError::Spec(format!("augment.sigma must be nonnegative, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(DataError::Spec(format!("augment.dropout must lie in [0, 1], got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor<f64>,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn new(x: Tensor<f64>, y: Vec<usize>) -> Result<Self, DataError> {
        if x.rows() != y.len() {
            return Err(DataError::LabelCount {
                rows: x.rows(),
                labels: y.len(),
            });
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.x.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.y.iter().max().map_or(0, |m| m + 1)
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian clusters around centers placed at `center_scale` along random
/// directions. Train and test rows are separate draws from the `data` stream.
pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(LabeledSet, LabeledSet), DataError> {
    spec.validate()?;
    let mut rng = stream_rng(seed, Stream::Data);
    let d = spec.d_in;
    let centers: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            let dir: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.into_iter().map(|v| spec.center_scale * v / norm).collect()
        })
        .collect();
    let mut draw = |per_class: usize| {
        let mut data = Vec::with_capacity(per_class * spec.n_classes * d);
        let mut y = Vec::with_capacity(per_class * spec.n_classes);
        for _ in 0..per_class {
            for (c, center) in centers.iter().enumerate() {
                data.extend(center.iter().map(|&m| m + spec.noise * gaussian(&mut rng)));
                y.push(c);
            }
        }
        LabeledSet {
            x: Tensor::matrix(y.len(), d, data).expect("sized"),
            y,
        }
    };
    let train = draw(spec.train_per_class);
    let test = draw(spec.test_per_class);
    Ok((train, test))
}

/// One augmented copy: additive noise, then an independent dropout mask.
pub fn augment<R: Rng + ?Sized>(x: &[f64], aug: &AugmentSpec, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let noisy = if aug.sigma > 0.0 { v + aug.sigma * gaussian(rng) } else { v };
            let drop = aug.dropout > 0.0 && rng.random::<f64>() < aug.dropout;
            if drop {
                0.0
            } else {
                noisy
            }
        })
        .collect()
}

pub fn two_views<R: Rng + ?Sized>(x: &[f64], aug: &AugmentSpec, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let u1 = augment(x, aug, rng);
    let u2 = augment(x, aug, rng);
    (u1, u2)
}

/// Reads `label, feature…` rows. Lines starting with `#` are skipped.
pub fn read_csv_dataset(path: &Path) -> Result<LabeledSet, DataError> {
    let err = |line: u64, message: String| DataError::Csv {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| err(0, e.to_string()))?;
    let mut data = Vec::new();
    let mut y = Vec::new();
    let mut width = None;
    for rec in reader.records() {
        let rec = rec.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut fields = rec.iter();
        let label = fields
            .next()
            .ok_or_else(|| err(line, "empty row".into()))?
            .parse::<usize>()
            .map_err(|e| err(line, format!("label: {e}")))?;
        let feats: Vec<f64> = fields
            .map(|f| f.parse::<f64>().map_err(|e| err(line, format!("feature {f:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(err(line, "non-finite feature".into()));
        }
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(err(line, format!("expected {w} features, got {}", feats.len())))
            }
            _ => {}
        }
        data.extend(feats);
        y.push(label);
    }
    let w = width.ok_or_else(|| err(0, "no data rows".into()))?;
    if w == 0 {
        return Err(err(0, "rows carry no features".into()));
    }
    LabeledSet::new(Tensor::matrix(y.len(), w, data).expect("sized"), y)
}

/// Majority label among the `k` nearest training rows of every query.
///
/// Neighbours are ordered by (distance, label); vote ties go to the class
/// with the smaller summed neighbour distance, then the lower class index.
pub fn knn_predict<T: Scalar>(
    train: &Tensor<T>,
    train_y: &[usize],
    queries: &Tensor<T>,
    k: usize,
    metric: &DistanceKind<T>,
) -> Result<Vec<usize>, DataError> {
    let n = train.rows();
    if n == 0 || train.is_empty() {
        return Err(DataError::EmptyTrain);
    }
    if train_y.len() != n {
        return Err(DataError::LabelCount {
            rows: n,
            labels: train_y.len(),
        });
    }
    if k == 0 || k > n {
        return Err(DataError::TooFewNeighbours { k, n });
    }
    if queries.rows() > 0 && queries.cols() != train.cols() {
        return Err(DataError::Width {
            train: train.cols(),
            test: queries.cols(),
        });
    }
    let n_classes = train_y.iter().max().map_or(0, |m| m + 1);
    (0..queries.rows())
        .into_par_iter()
        .map(|q| {
            let query = queries.row(q);
            let mut dist: Vec<(T, usize)> = (0..n)
                .map(|i| Ok((metric.distance(query, train.row(i))?, train_y[i])))
                .collect::<Result<_, DistanceError>>()?;
            let order = |a: &(T, usize), b: &(T, usize)| {
                a.0.partial_cmp(&b.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
            };
            if k < n {
                dist.select_nth_unstable_by(k - 1, order);
            }
            let mut votes = vec![(0usize, T::zero()); n_classes];
            for &(d, label) in &dist[..k] {
                votes[label].0 += 1;
                votes[label].1 += d;
            }
            let mut best = 0;
            for c in 1..n_classes {
                let (bc, bd) = votes[best];
                let (cc, cd) = votes[c];
                if cc > bc || (cc == bc && cd < bd) {
                    best = c;
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<_>, DistanceError>>()
        .map_err(DataError::from)
}

pub fn knn_classify<T: Scalar>(
    train: &Tensor<T>,
    train_y: &[usize],
    test: &Tensor<T>,
    test_y: &[usize],
    k: usize,
    metric: &DistanceKind<T>,
) -> Result<f64, DataError> {
    if test.rows() != test_y.len() {
        return Err(DataError::LabelCount {
            rows: test.rows(),
            labels: test_y.len(),
        });
    }
    let pred = knn_predict(train, train_y, test, k, metric)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let hits = pred.iter().zip(test_y).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / pred.len() as f64)
}
