//! MLP encoder, optimizers and the self-supervised training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ResolvedRun, RunConfig};
use crate::data::{knn_classify, two_views, DataError, LabeledSet};
use crate::heads::{apply_head, head_node, normalize_columns, HeadConfig, HeadError, KeyMatrix};
use crate::linalg::{DiffError, DiffGraph, NodeId, Tensor, TensorError};
use crate::losses::{
    collapse_metrics, infonce_cosine_loss, infonce_twd_loss, simsiam_cosine_loss, simsiam_twd_loss,
    CollapseMetrics, LossError, Objective,
};
use crate::seeds::{stream_rng, Stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite gradient for parameter {param}; step skipped")]
    NonFiniteGradient { param: usize },
    #[error("{got} gradients for {expected} parameters")]
    GradientCount { expected: usize, got: usize },
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: u64 },
    #[error("representation collapsed by epoch {epoch}")]
    Collapsed { epoch: usize },
    #[error("input has {got} columns, encoder expects {expected}")]
    InputWidth { expected: usize, got: usize },
}

/// A failed run, keeping whatever was recorded before the failure.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct TrainFailure {
    pub error: TrainError,
    pub record: Option<Box<RunRecord>>,
}

impl From<TrainError> for TrainFailure {
    fn from(error: TrainError) -> Self {
        Self { error, record: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// `d_in, hidden…, d_out`.
    pub widths: Vec<usize>,
    /// Applied between layers, not after the last one.
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn d_out(&self) -> usize {
        *self.widths.last().expect("at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`.
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// Uniform `±1/√fan_in` weights and biases.
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let layers = cfg
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<_>>();
                let wt = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)).expect("sized");
                let b = Tensor::vector(draw(fan_out));
                Linear { w: wt, b }
            })
            .collect();
        Self {
            layers,
            activation: cfg.activation,
        }
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let layers = cfg
            .widths
            .windows(2)
            .map(|w| Linear {
                w: Tensor::zeros(&[w[0], w[1]]),
                b: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Self {
            layers,
            activation: cfg.activation,
        }
    }

    /// Single linear layer computing the identity.
    pub fn identity(d: usize) -> Self {
        Self {
            layers: vec![Linear {
                w: Tensor::identity(d),
                b: Tensor::zeros(&[d]),
            }],
            activation: Activation::Identity,
        }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn forward(&self, x: &Tensor<f64>) -> Result<Tensor<f64>, TrainError> {
        if x.cols() != self.d_in() {
            return Err(TrainError::InputWidth {
                expected: self.d_in(),
                got: x.cols(),
            });
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.w)?;
            for r in 0..h.rows() {
                for (v, &b) in h.row_mut(r).iter_mut().zip(layer.b.data()) {
                    *v += b;
                }
            }
            if i < last && self.activation == Activation::Relu {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Tape form; `params` holds one `(w, b)` node pair per layer.
    pub fn forward_node(&self, g: &mut DiffGraph<f64>, x: NodeId, params: &[NodeId]) -> NodeId {
        let mut h = x;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            h = g.matmul(h, params[2 * i]);
            h = g.add_bias(h, params[2 * i + 1]);
            if i < last && self.activation == Activation::Relu {
                h = g.relu(h);
            }
        }
        h
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor<f64>> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<f64>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b])
    }
}

/// Encoder, optional SimSiam predictor, and head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Mlp,
    pub predictor: Option<Mlp>,
    pub head: HeadConfig,
    /// ArcFace key matrix; trainable only for learned keys.
    pub key: Option<Tensor<f64>>,
}

impl Model {
    pub fn init(run: &ResolvedRun, seed: u64) -> Result<Self, TrainError> {
        let mut rng = stream_rng(seed, Stream::Init);
        let encoder = Mlp::init(&run.encoder, &mut rng);
        let predictor = run.predictor.as_ref().map(|p| Mlp::init(p, &mut rng));
        let key = run.head.init_key::<f64, _>(&mut rng)?.map(KeyMatrix::into_tensor);
        Ok(Self {
            encoder,
            predictor,
            head: run.head,
            key,
        })
    }

    /// Same shapes as [`Model::init`], all parameters zero.
    pub fn zeros(run: &ResolvedRun) -> Result<Self, TrainError> {
        let mut m = Self::init(run, 0)?;
        m.encoder = Mlp::zeros(&run.encoder);
        m.predictor = run.predictor.as_ref().map(Mlp::zeros);
        if m.head.learned_key() {
            m.key = m.key.map(|k| Tensor::zeros(k.shape()));
        }
        Ok(m)
    }

    pub fn trains_key(&self) -> bool {
        self.head.learned_key()
    }

    /// Trainable tensors in a fixed order: encoder, predictor, learned key.
    pub fn params(&self) -> Vec<&Tensor<f64>> {
        let mut out: Vec<&Tensor<f64>> = self.encoder.tensors().collect();
        if let Some(p) = &self.predictor {
            out.extend(p.tensors());
        }
        if self.trains_key() {
            out.extend(self.key.as_ref());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let trains_key = self.trains_key();
        let mut out: Vec<&mut Tensor<f64>> = self.encoder.tensors_mut().collect();
        if let Some(p) = &mut self.predictor {
            out.extend(p.tensors_mut());
        }
        if trains_key {
            out.extend(self.key.as_mut());
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mlp = |prefix: &str, m: &Mlp| {
            (0..m.layers.len())
                .flat_map(|i| [format!("{prefix}.{i}.w"), format!("{prefix}.{i}.b")])
                .collect::<Vec<_>>()
        };
        let mut names = mlp("encoder", &self.encoder);
        if let Some(p) = &self.predictor {
            names.extend(mlp("predictor", p));
        }
        if self.trains_key() {
            names.push("key".into());
        }
        names
    }

    /// Renormalizes learned key columns after an update.
    pub fn project(&mut self) {
        if self.trains_key() {
            if let Some(k) = &mut self.key {
                normalize_columns(k);
            }
        }
    }

    pub fn features(&self, x: &Tensor<f64>) -> Result<Tensor<f64>, TrainError> {
        self.encoder.forward(x)
    }

    /// Head outputs (probability vectors) for every row of `x`.
    pub fn embed(&self, x: &Tensor<f64>) -> Result<Tensor<f64>, TrainError> {
        let f = self.features(x)?;
        let key = match &self.key {
            Some(k) => Some(KeyMatrix::new(k.clone())?),
            None => None,
        };
        let rows = (0..f.rows())
            .map(|i| apply_head(&self.head, f.row(i), key.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        if rows.is_empty() {
            return Ok(Tensor::zeros(&[0, self.head.d_prob]));
        }
        Ok(Tensor::from_rows(&rows)?)
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    pub fn adam_default() -> Self {
        OptimizerConfig::Adam {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }

    pub fn simsiam_default() -> Self {
        OptimizerConfig::Sgd {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-5,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be finite and nonnegative, got {v}"))
            }
        };
        match *self {
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                nonneg("lr", lr)?;
                nonneg("weight_decay", weight_decay)?;
                if !(0.0..1.0).contains(&momentum) {
                    return Err(format!("momentum must lie in [0, 1), got {momentum}"));
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                nonneg("lr", lr)?;
                nonneg("weight_decay", weight_decay)?;
                for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                    if !(0.0..1.0).contains(&b) {
                        return Err(format!("{name} must lie in [0, 1), got {b}"));
                    }
                }
                if !(eps > 0.0) {
                    return Err(format!("eps must be positive, got {eps}"));
                }
            }
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

/// Moment buffers and step count. Weight decay is added to the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &[&Tensor<f64>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        let v = match config {
            OptimizerConfig::Adam { .. } => zeros(),
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        Self {
            config,
            m: zeros(),
            v,
            step: 0,
        }
    }

    /// Applies one update. Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor<f64>], grads: &[Tensor<f64>]) -> Result<(), TrainError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TrainError::GradientCount {
                expected: params.len(),
                got: grads.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                }
                .into());
            }
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient { param: i });
            }
        }
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    let (pd, gd, bd) = (p.data_mut(), g.data(), buf.data_mut());
                    for i in 0..pd.len() {
                        let d = gd[i] + weight_decay * pd[i];
                        bd[i] = momentum * bd[i] + d;
                        pd[i] -= lr * bd[i];
                    }
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    let (pd, gd, md, vd) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
                    for i in 0..pd.len() {
                        let d = gd[i] + weight_decay * pd[i];
                        md[i] = beta1 * md[i] + (1.0 - beta1) * d;
                        vd[i] = beta2 * vd[i] + (1.0 - beta2) * d * d;
                        let mh = md[i] / c1;
                        let vh = vd[i] / c2;
                        pd[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Optimizer update followed by the unit-column projection of learned keys.
pub fn optimizer_step(state: &mut OptimizerState, model: &mut Model, grads: &[Tensor<f64>]) -> Result<(), TrainError> {
    state.step(&mut model.params_mut(), grads)?;
    model.project();
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub collapse: CollapseMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub config: RunConfig,
    pub seed: u64,
    /// Collapse metrics before the first update.
    pub initial: CollapseMetrics,
    pub epochs: Vec<EpochRecord>,
    pub knn_k: usize,
    pub metric: String,
    pub final_accuracy: Option<f64>,
    pub collapsed: bool,
    pub collapse_epoch: Option<usize>,
    /// Failure message when the run stopped early.
    pub aborted: Option<String>,
    pub steps: u64,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn loss_series(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// One JSON object per epoch followed by a summary object.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let row = serde_json::json!({ "kind": "epoch", "seed": self.seed, "row": e });
            out.push_str(&row.to_string());
            out.push('\n');
        }
        let mut summary = self.clone();
        summary.epochs.clear();
        let row = serde_json::json!({ "kind": "summary", "row": summary });
        out.push_str(&row.to_string());
        out.push('\n');
        out
    }

    pub fn from_jsonl(s: &str) -> Result<Self, serde_json::Error> {
        let mut epochs = Vec::new();
        let mut summary: Option<RunRecord> = None;
        for line in s.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)?;
            let row = v.get("row").cloned().unwrap_or_default();
            match v.get("kind").and_then(|k| k.as_str()) {
                Some("epoch") => epochs.push(serde_json::from_value(row)?),
                _ => summary = Some(serde_json::from_value(row)?),
            }
        }
        let mut rec = summary.ok_or_else(|| serde::de::Error::custom("missing summary row"))?;
        rec.epochs = epochs;
        Ok(rec)
    }
}

/// Detached copies of the target branch, used to check that stop-gradient
/// blocks every adjoint.
#[derive(Debug, Clone)]
pub enum TargetMode {
    StopGradient,
    Constant(Tensor<f64>, Tensor<f64>),
}

/// One step's tape with handles to the loss and the trainable leaves.
pub struct LossGraph {
    pub graph: DiffGraph<f64>,
    pub loss: NodeId,
    pub params: Vec<NodeId>,
    /// Pre-stop-gradient target outputs (SimSiam only).
    pub targets: Option<(NodeId, NodeId)>,
}

pub struct Trainer {
    pub run: ResolvedRun,
    pub model: Model,
    pub optimizer: OptimizerState,
}

impl Trainer {
    pub fn new(run: ResolvedRun, seed: u64) -> Result<Self, TrainError> {
        let model = Model::init(&run, seed)?;
        let optimizer = OptimizerState::new(run.optimizer, &model.params());
        Ok(Self { run, model, optimizer })
    }

    pub fn with_model(run: ResolvedRun, model: Model) -> Self {
        let optimizer = OptimizerState::new(run.optimizer, &model.params());
        Self { run, model, optimizer }
    }

    pub fn loss_graph(&self, x1: &Tensor<f64>, x2: &Tensor<f64>, mode: &TargetMode) -> Result<LossGraph, TrainError> {
        let r = x1.rows();
        let model = &self.model;
        let mut g = DiffGraph::new();
        let params: Vec<NodeId> = model.params().into_iter().map(|p| g.leaf(p.clone())).collect();
        let n_enc = 2 * model.encoder.layers.len();
        let n_pred = model.predictor.as_ref().map_or(0, |p| 2 * p.layers.len());
        let key = match (&model.key, model.trains_key()) {
            (Some(_), true) => Some(params[n_enc + n_pred]),
            (Some(k), false) => Some(g.leaf(k.clone())),
            (None, _) => None,
        };
        let (u1, u2) = (g.leaf(x1.clone()), g.leaf(x2.clone()));
        let f1 = model.encoder.forward_node(&mut g, u1, &params[..n_enc]);
        let f2 = model.encoder.forward_node(&mut g, u2, &params[..n_enc]);
        let head = &model.head;
        let objective = self.run.loss.objective;
        let (loss, targets) = if objective.is_simsiam() {
            let pred = model.predictor.as_ref().expect("simsiam runs carry a predictor");
            let pp = &params[n_enc..n_enc + n_pred];
            let h1 = pred.forward_node(&mut g, f1, pp);
            let h2 = pred.forward_node(&mut g, f2, pp);
            let p1 = head_node(&mut g, head, h1, key)?;
            let p2 = head_node(&mut g, head, h2, key)?;
            let z1 = head_node(&mut g, head, f1, key)?;
            let z2 = head_node(&mut g, head, f2, key)?;
            let (s1, s2) = match mode {
                TargetMode::StopGradient => (g.stop_grad(z1), g.stop_grad(z2)),
                TargetMode::Constant(c1, c2) => {
                    let (c1, c2) = (g.leaf(c1.clone()), g.leaf(c2.clone()));
                    (g.stop_grad(c1), g.stop_grad(c2))
                }
            };
            let loss = match objective {
                Objective::SimsiamTwd => {
                    simsiam_twd_loss(&mut g, (p1, p2), (s1, s2), &self.run.tree, self.run.loss.lambda_jd)?
                }
                _ => simsiam_cosine_loss(&mut g, (p1, p2), (s1, s2))?,
            };
            (loss, Some((z1, z2)))
        } else {
            let a1 = head_node(&mut g, head, f1, key)?;
            let a2 = head_node(&mut g, head, f2, key)?;
            let cfg = &self.run.loss;
            let loss = match objective {
                Objective::InfonceTwd => infonce_twd_loss(&mut g, a1, a2, r, &self.run.tree, cfg.tau, cfg.lambda_jd)?,
                _ => infonce_cosine_loss(&mut g, a1, a2, r, cfg.tau)?,
            };
            (loss, None)
        };
        Ok(LossGraph {
            graph: g,
            loss,
            params,
            targets,
        })
    }

    /// Loss value and parameter gradients on one batch of paired views.
    pub fn loss_and_grads(&self, x1: &Tensor<f64>, x2: &Tensor<f64>) -> Result<(f64, Vec<Tensor<f64>>), TrainError> {
        let mut lg = self.loss_graph(x1, x2, &TargetMode::StopGradient)?;
        let loss = lg.graph.forward(lg.loss)?.scalar_value().expect("scalar loss");
        let grads = lg.graph.backward(lg.loss)?;
        Ok((loss, lg.params.iter().map(|&p| grads.get(p)).collect()))
    }

    pub fn step(&mut self, x1: &Tensor<f64>, x2: &Tensor<f64>) -> Result<f64, TrainError> {
        let (loss, grads) = self.loss_and_grads(x1, x2)?;
        optimizer_step(&mut self.optimizer, &mut self.model, &grads)?;
        Ok(loss)
    }

    pub fn probe(&self, x: &Tensor<f64>) -> Result<CollapseMetrics, TrainError> {
        let emb = self.model.embed(x)?;
        Ok(collapse_metrics(&emb, &self.run.tree)?)
    }

    pub fn knn_accuracy(&self, train: &LabeledSet, test: &LabeledSet, k: usize) -> Result<f64, TrainError> {
        let tr = self.model.embed(&train.x)?;
        let te = self.model.embed(&test.x)?;
        Ok(knn_classify(&tr, &train.y, &te, &test.y, k, &self.run.eval_metric)?)
    }
}

fn rows_of(x: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let c = x.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::matrix(idx.len(), c, data).expect("sized")
}

/// Runs one seed of `cfg` end to end.
pub fn train(cfg: &RunConfig, seed: u64) -> Result<RunRecord, TrainFailure> {
    train_model(cfg, seed).map(|(record, _)| record)
}

/// As [`train`], also returning the trained model.
pub fn train_model(cfg: &RunConfig, seed: u64) -> Result<(RunRecord, Model), TrainFailure> {
    let run = cfg.resolve().map_err(TrainError::from)?;
    let (train_set, test_set) = cfg.load_data(seed).map_err(TrainError::from)?;
    let mut trainer = Trainer::new(run, seed)?;
    let record = train_with(cfg, &mut trainer, &train_set, &test_set, seed)?;
    Ok((record, trainer.model))
}

/// Training loop over a prepared trainer and data.
pub fn train_with(
    cfg: &RunConfig,
    trainer: &mut Trainer,
    train_set: &LabeledSet,
    test_set: &LabeledSet,
    seed: u64,
) -> Result<RunRecord, TrainFailure> {
    let start = Instant::now();
    let tc = &cfg.train;
    let aug = cfg.data.synthetic.augment;
    let mut shuffle_rng = stream_rng(seed, Stream::Shuffling);
    let mut aug_rng = stream_rng(seed, Stream::Augmentation);

    let probe_idx: Vec<usize> = (0..test_set.len().min(tc.probe_size)).collect();
    let probe_x = rows_of(&test_set.x, &probe_idx);
    let initial = trainer.probe(&probe_x)?;
    let mut record = RunRecord {
        label: cfg.label(),
        config: cfg.clone(),
        seed,
        initial,
        epochs: Vec::new(),
        knn_k: cfg.eval.k,
        metric: trainer.run.eval_metric.name().into(),
        final_accuracy: None,
        collapsed: false,
        collapse_epoch: None,
        aborted: None,
        steps: 0,
        wall_clock_secs: 0.0,
    };
    let fail = |mut record: RunRecord, error: TrainError, start: Instant| {
        record.aborted = Some(error.to_string());
        record.wall_clock_secs = start.elapsed().as_secs_f64();
        TrainFailure {
            error,
            record: Some(Box::new(record)),
        }
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut streak = 0;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut v1 = Vec::with_capacity(chunk.len());
            let mut v2 = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (a, b) = two_views(train_set.x.row(i), &aug, &mut aug_rng);
                v1.push(a);
                v2.push(b);
            }
            let (x1, x2) = match (Tensor::from_rows(&v1), Tensor::from_rows(&v2)) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => return Err(fail(record, e.into(), start)),
            };
            let step = trainer.optimizer.step;
            match trainer.step(&x1, &x2) {
                Ok(loss) if loss.is_finite() => {
                    total += loss;
                    batches += 1;
                }
                Ok(_) | Err(TrainError::Diff(DiffError::NonFinite { .. })) | Err(TrainError::NonFiniteGradient { .. }) => {
                    return Err(fail(record, TrainError::Diverged { epoch, step: step + 1 }, start));
                }
                Err(e) => return Err(fail(record, e, start)),
            }
        }
        record.steps = trainer.optimizer.step;
        let collapse = match trainer.probe(&probe_x) {
            Ok(c) => c,
            Err(e) => return Err(fail(record, e, start)),
        };
        if collapse.mean_pairwise_twd < tc.collapse_threshold {
            streak += 1;
        } else {
            streak = 0;
        }
        let loss = if batches > 0 { total / batches as f64 } else { f64::NAN };
        record.epochs.push(EpochRecord { epoch, loss, collapse });
        if streak >= tc.collapse_patience && !record.collapsed {
            record.collapsed = true;
            record.collapse_epoch = Some(epoch);
            if tc.abort_on_collapse {
                return Err(fail(record, TrainError::Collapsed { epoch }, start));
            }
        }
    }
    let k = cfg.eval.k.min(train_set.len());
    match trainer.knn_accuracy(train_set, test_set, k) {
        Ok(acc) => record.final_accuracy = Some(acc),
        Err(e) => return Err(fail(record, e, start)),
    }
    record.knn_k = k;
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{HeadKind, KeyKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_zero_encoders() {
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, -1.0]]).unwrap();
        assert_eq!(Mlp::identity(3).forward(&x).unwrap(), x);
        let cfg = EncoderConfig {
            widths: vec![3, 4, 2],
            activation: Activation::Relu,
        };
        let z = Mlp::zeros(&cfg).forward(&x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let a = Mlp::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).forward(&x).unwrap();
        let b = Mlp::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).forward(&x).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            Mlp::identity(2).forward(&x),
            Err(TrainError::InputWidth { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn tape_encoder_matches_pure() {
        let cfg = EncoderConfig {
            widths: vec![3, 5, 2],
            activation: Activation::Relu,
        };
        let mlp = Mlp::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.1, -1.0]]).unwrap();
        let mut g = DiffGraph::new();
        let params: Vec<NodeId> = mlp.tensors().map(|t| g.leaf(t.clone())).collect();
        let xn = g.leaf(x.clone());
        let out = mlp.forward_node(&mut g, xn, &params);
        let got = g.forward(out).unwrap().clone();
        assert!(got.max_abs_diff(&mlp.forward(&x).unwrap()).unwrap() < 1e-15);
    }

    fn quad_step(cfg: OptimizerConfig, w0: f64) -> f64 {
        let mut w = Tensor::vector(vec![w0]);
        let mut st = OptimizerState::new(cfg, &[&w]);
        let g = Tensor::vector(vec![w0]);
        st.step(&mut [&mut w], &[g]).unwrap();
        w.data()[0]
    }

    #[test]
    fn sgd_hand_computed() {
        let sgd = OptimizerConfig::Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        assert!((quad_step(sgd, 1.0) - 0.9).abs() < 1e-15);
        // momentum: second step uses buf = 0.9·1 + 0.9
        let mut w = Tensor::vector(vec![1.0]);
        let mut st = OptimizerState::new(sgd, &[&w]);
        st.step(&mut [&mut w], &[Tensor::vector(vec![1.0])]).unwrap();
        let g = Tensor::vector(vec![w.data()[0]]);
        st.step(&mut [&mut w], &[g]).unwrap();
        assert!((w.data()[0] - (0.9 - 0.1 * (0.9 + 0.9))).abs() < 1e-15);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn adam_first_step_is_lr() {
        for scale in [1e-3, 1.0, 1e3] {
            let adam = OptimizerConfig::Adam {
                lr: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            };
            let w1 = quad_step(adam, scale);
            assert!(((scale - w1) - 0.01).abs() < 1e-7, "{scale}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut w = Tensor::vector(vec![1.0, 2.0]);
        let mut st = OptimizerState::new(OptimizerConfig::adam_default(), &[&w]);
        let e = st.step(&mut [&mut w], &[Tensor::vector(vec![1.0, f64::NAN])]);
        assert!(matches!(e, Err(TrainError::NonFiniteGradient { param: 0 })));
        assert_eq!(w.data(), &[1.0, 2.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn learned_key_projection() {
        let mut cfg = RunConfig::default();
        cfg.head.kind = crate::config::HeadName::Arcface;
        cfg.head.key = KeyKind::Learned;
        let run = cfg.resolve().unwrap();
        assert_eq!(
            run.head.kind,
            HeadKind::ArcFace {
                key: KeyKind::Learned,
                eta: 0.1
            }
        );
        let mut model = Model::init(&run, 3).unwrap();
        let mut st = OptimizerState::new(OptimizerConfig::adam_default(), &model.params());
        let grads: Vec<Tensor<f64>> = model.params().iter().map(|p| p.map(|_| 0.7)).collect();
        optimizer_step(&mut st, &mut model, &grads).unwrap();
        let k = KeyMatrix::new(model.key.clone().unwrap()).unwrap();
        assert!(k.column_norms().iter().all(|n| (n - 1.0).abs() < 1e-9));
        assert_eq!(model.param_names().last().unwrap(), "key");
    }

    #[test]
    fn jsonl_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 2;
        cfg.train.batch_size = 16;
        cfg.data.synthetic.train_per_class = 8;
        cfg.data.synthetic.test_per_class = 4;
        cfg.eval.k = 3;
        let rec = train(&cfg, 1).unwrap();
        assert_eq!(rec.epochs.len(), 2);
        let back = RunRecord::from_jsonl(&rec.to_jsonl()).unwrap();
        assert_eq!(back, rec);
    }
}
