//! Run configuration (TOML) and its resolution into concrete components.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_synthetic, read_csv_dataset, DataError, LabeledSet, SyntheticSpec};
use crate::heads::{HeadConfig, HeadError, HeadKind, KeyKind, DEFAULT_ETA};
use crate::losses::{LossConfig, LossError, Objective, DEFAULT_LAMBDA_JD, DEFAULT_TAU};
use crate::train::{Activation, EncoderConfig, OptimizerConfig};
use crate::tree::{TreeError, TreeTopology};
use crate::twd::DistanceKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TreeKind {
    #[default]
    Tv,
    Cluster,
    Chain,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeSection {
    pub kind: TreeKind,
    /// Must equal the head's output width when given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_leaves: Option<usize>,
    /// Leaf edge weight of the TV tree.
    pub edge_weight: f64,
    pub n_clusters: usize,
    pub internal_weight: f64,
    pub leaf_weight: f64,
    /// Spine gaps of the chain tree; unit gaps when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gaps: Option<Vec<f64>>,
    /// Topology document for `kind = "file"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for TreeSection {
    fn default() -> Self {
        Self {
            kind: TreeKind::Tv,
            n_leaves: None,
            edge_weight: 0.5,
            n_clusters: 4,
            internal_weight: 0.5,
            leaf_weight: 0.5,
            gaps: None,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HeadName {
    #[default]
    Softmax,
    Sem,
    Arcface,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    pub kind: HeadName,
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    pub l: Option<usize>,
    #[serde(rename = "V", skip_serializing_if = "Option::is_none")]
    pub v: Option<usize>,
    pub eta: f64,
    pub key: KeyKind,
}

impl Default for HeadSection {
    fn default() -> Self {
        Self {
            kind: HeadName::Softmax,
            l: None,
            v: None,
            eta: DEFAULT_ETA,
            key: KeyKind::Dct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub objective: Objective,
    pub tau: f64,
    pub lambda_jd: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            objective: Objective::InfonceTwd,
            tau: DEFAULT_TAU,
            lambda_jd: DEFAULT_LAMBDA_JD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub hidden: Vec<usize>,
    pub d_out: usize,
    pub activation: Activation,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            d_out: 64,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub synthetic: SyntheticSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Mean pairwise TWD below which an epoch counts as collapsed.
    pub collapse_threshold: f64,
    /// Consecutive collapsed epochs that flag the run.
    pub collapse_patience: usize,
    pub abort_on_collapse: bool,
    /// Test rows used for per-epoch collapse metrics.
    pub probe_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            collapse_threshold: 1e-4,
            collapse_patience: 5,
            abort_on_collapse: false,
            probe_size: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalMetric {
    /// Tree distance for TWD objectives, cosine for cosine objectives.
    #[default]
    Auto,
    Twd,
    Tv,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub k: usize,
    pub metric: EvalMetric,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            k: 50,
            metric: EvalMetric::Auto,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub tree: TreeSection,
    #[serde(default)]
    pub head: HeadSection,
    #[serde(default)]
    pub loss: LossSection,
    /// Defaults to Adam for InfoNCE objectives and SGD for SimSiam ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            output_dir: None,
            tree: TreeSection::default(),
            head: HeadSection::default(),
            loss: LossSection::default(),
            optimizer: None,
            encoder: EncoderSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Concrete components a run is built from.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub head: HeadConfig,
    pub tree: TreeTopology<f64>,
    pub loss: LossConfig<f64>,
    pub encoder: EncoderConfig,
    pub predictor: Option<EncoderConfig>,
    pub optimizer: OptimizerConfig,
    pub eval_metric: DistanceKind<f64>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        self.optimizer.unwrap_or(if self.loss.objective.is_simsiam() {
            OptimizerConfig::simsiam_default()
        } else {
            OptimizerConfig::adam_default()
        })
    }

    pub fn head_config(&self) -> Result<HeadConfig, ConfigError> {
        let d = self.encoder.d_out;
        let kind = match self.head.kind {
            HeadName::Softmax => HeadKind::Softmax,
            HeadName::Sem => {
                let (l, v) = match (self.head.l, self.head.v) {
                    (Some(l), Some(v)) => (l, v),
                    (Some(l), None) if l > 0 => (l, d / l),
                    (None, Some(v)) if v > 0 => (d / v, v),
                    (None, None) => (d / 4, 4),
                    _ => return Err(invalid("head", "SEM block sizes must be positive")),
                };
                HeadKind::Sem { l, v }
            }
            HeadName::Arcface => HeadKind::ArcFace {
                key: self.head.key,
                eta: self.head.eta,
            },
        };
        Ok(HeadConfig::new(kind, d)?)
    }

    pub fn tree_topology(&self, n_leaves: usize) -> Result<TreeTopology<f64>, ConfigError> {
        let t = &self.tree;
        if let Some(n) = t.n_leaves {
            if n != n_leaves {
                return Err(invalid(
                    "tree.n_leaves",
                    format!("{n} leaves but the head emits {n_leaves} probabilities"),
                ));
            }
        }
        let tree = match t.kind {
            TreeKind::Tv => TreeTopology::tv(n_leaves, t.edge_weight)?,
            TreeKind::Cluster => {
                if t.n_clusters == 0 || n_leaves % t.n_clusters != 0 {
                    return Err(invalid(
                        "tree.n_clusters",
                        format!("{} clusters do not divide {n_leaves} leaves", t.n_clusters),
                    ));
                }
                TreeTopology::cluster(
                    t.n_clusters,
                    n_leaves / t.n_clusters,
                    t.internal_weight,
                    t.leaf_weight,
                )?
            }
            TreeKind::Chain => {
                let gaps = t.gaps.clone().unwrap_or_else(|| vec![1.0; n_leaves.saturating_sub(1)]);
                TreeTopology::chain(n_leaves, &gaps)?
            }
            TreeKind::File => {
                let path = t.path.as_ref().ok_or_else(|| invalid("tree.path", "required for kind = \"file\""))?;
                let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                let tree = TreeTopology::from_json(&s)?;
                if tree.n_leaves() != n_leaves {
                    return Err(invalid(
                        "tree.path",
                        format!("topology has {} leaves, head emits {n_leaves}", tree.n_leaves()),
                    ));
                }
                tree
            }
        };
        if tree.weights().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("tree", "edge weights must be finite and nonnegative"));
        }
        Ok(tree)
    }

    /// Checks every cross-field constraint and builds the components.
    pub fn resolve(&self) -> Result<ResolvedRun, ConfigError> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        let enc = &self.encoder;
        if enc.d_out == 0 || enc.hidden.contains(&0) {
            return Err(invalid("encoder", "layer widths must be positive"));
        }
        let head = self.head_config()?;
        let tree = self.tree_topology(head.d_prob)?;
        let objective = self.loss.objective;
        let loss = LossConfig {
            objective,
            tau: self.loss.tau,
            lambda_jd: self.loss.lambda_jd,
            distance: if objective.uses_twd() {
                DistanceKind::Twd(tree.clone())
            } else {
                DistanceKind::Cosine
            },
        };
        loss.validate()?;
        let optimizer = self.optimizer();
        optimizer.validate().map_err(|m| invalid("optimizer", m))?;

        let tr = &self.train;
        if tr.batch_size < 2 {
            return Err(invalid("train.batch_size", "must be at least 2"));
        }
        if tr.collapse_patience == 0 {
            return Err(invalid("train.collapse_patience", "must be positive"));
        }
        if tr.probe_size < 2 {
            return Err(invalid("train.probe_size", "must be at least 2"));
        }
        if !(tr.collapse_threshold >= 0.0 && tr.collapse_threshold.is_finite()) {
            return Err(invalid("train.collapse_threshold", "must be nonnegative"));
        }
        if self.eval.k == 0 {
            return Err(invalid("eval.k", "must be positive"));
        }
        match self.data.source {
            DataSource::Synthetic => self.data.synthetic.validate()?,
            DataSource::Csv => {
                if self.data.train_csv.is_none() || self.data.test_csv.is_none() {
                    return Err(invalid("data", "csv source needs train_csv and test_csv"));
                }
            }
        }

        let mut widths = Vec::with_capacity(enc.hidden.len() + 2);
        widths.push(self.d_in()?);
        widths.extend(&enc.hidden);
        widths.push(enc.d_out);
        let encoder = EncoderConfig {
            widths,
            activation: enc.activation,
        };
        let predictor = objective.is_simsiam().then(|| EncoderConfig {
            widths: vec![enc.d_out, (enc.d_out / 4).max(1), enc.d_out],
            activation: Activation::Relu,
        });
        let eval_metric = match (self.eval.metric, objective.uses_twd()) {
            (EvalMetric::Auto, true) | (EvalMetric::Twd, _) => DistanceKind::Twd(tree.clone()),
            (EvalMetric::Auto, false) | (EvalMetric::Cosine, _) => DistanceKind::Cosine,
            (EvalMetric::Tv, _) => DistanceKind::TotalVariation,
        };
        Ok(ResolvedRun {
            head,
            tree,
            loss,
            encoder,
            predictor,
            optimizer,
            eval_metric,
        })
    }

    /// Input width implied by the data section.
    pub fn d_in(&self) -> Result<usize, ConfigError> {
        match self.data.source {
            DataSource::Synthetic => Ok(self.data.synthetic.d_in),
            DataSource::Csv => {
                let path = self.data.train_csv.as_ref().ok_or_else(|| invalid("data.train_csv", "missing"))?;
                Ok(read_csv_dataset(path)?.d_in())
            }
        }
    }

    /// Train and test sets for `seed` (synthetic data is drawn per seed).
    pub fn load_data(&self, seed: u64) -> Result<(LabeledSet, LabeledSet), ConfigError> {
        match self.data.source {
            DataSource::Synthetic => Ok(make_synthetic(&self.data.synthetic, seed)?),
            DataSource::Csv => {
                let missing = || invalid("data", "csv source needs train_csv and test_csv");
                let train = read_csv_dataset(self.data.train_csv.as_ref().ok_or_else(missing)?)?;
                let test = read_csv_dataset(self.data.test_csv.as_ref().ok_or_else(missing)?)?;
                if train.d_in() != test.d_in() {
                    return Err(invalid(
                        "data",
                        format!("train has {} features, test {}", train.d_in(), test.d_in()),
                    ));
                }
                Ok((train, test))
            }
        }
    }

    /// Short human label for tables, e.g. `infonce_twd/tv/af(dct)+jd`.
    pub fn label(&self) -> String {
        let head = self.head_config().map(|h| h.label()).unwrap_or_else(|_| "?".into());
        let tree = match self.tree.kind {
            TreeKind::Tv => "tv",
            TreeKind::Cluster => "cluster",
            TreeKind::Chain => "chain",
            TreeKind::File => "file",
        };
        let jd = if self.loss.lambda_jd > 0.0 { "+jd" } else { "" };
        let obj = serde_json::to_value(self.loss.objective)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        format!("{obj}/{tree}/{head}{jd}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::default();
        let r = cfg.resolve().unwrap();
        assert_eq!(r.encoder.widths, vec![32, 128, 128, 64]);
        assert_eq!(r.head.d_prob, 64);
        assert!(r.predictor.is_none());
        assert_eq!(r.optimizer, OptimizerConfig::adam_default());
        assert_eq!(cfg.label(), "infonce_twd/tv/softmax+jd");
    }

    #[test]
    fn parses_nested_sections() {
        let cfg = RunConfig::from_toml_str(
            r#"
            seeds = [1, 2, 3]
            [tree]
            kind = "cluster"
            n_clusters = 4
            [head]
            kind = "arcface"
            key = "pe"
            eta = 0.2
            [loss]
            objective = "simsiam_twd"
            lambda_jd = 0.0
            [encoder]
            hidden = [64]
            d_out = 8
            [data.synthetic]
            d_in = 10
            [train]
            epochs = 3
            "#,
        )
        .unwrap();
        let r = cfg.resolve().unwrap();
        assert_eq!(r.tree.n_nodes(), 4 + 8);
        assert_eq!(r.predictor.unwrap().widths, vec![8, 2, 8]);
        assert_eq!(r.optimizer, OptimizerConfig::simsiam_default());
        assert_eq!(r.encoder.widths, vec![10, 64, 8]);
        assert_eq!(
            r.head.kind,
            HeadKind::ArcFace {
                key: KeyKind::Pe,
                eta: 0.2
            }
        );
    }

    #[test]
    fn rejects_bad_sem_split() {
        let cfg = RunConfig::from_toml_str("[head]\nkind = \"sem\"\nL = 3\nV = 4\n").unwrap();
        assert!(matches!(cfg.resolve(), Err(ConfigError::Head(_))));
    }

    #[test]
    fn parse_errors_carry_location() {
        let e = RunConfig::from_toml_str("[loss]\ntau = \"x\"\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = RunConfig::from_toml_str("[train]\nepoch = 3\n").unwrap_err();
        assert!(e.to_string().contains("epoch"), "{e}");
    }

    #[test]
    fn toml_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.seeds = vec![4, 5];
        cfg.head.kind = HeadName::Sem;
        cfg.head.l = Some(4);
        cfg.head.v = Some(4);
        cfg.optimizer = Some(OptimizerConfig::simsiam_default());
        cfg.tree.gaps = Some(vec![1.0, 2.0]);
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn cross_field_checks() {
        let mut cfg = RunConfig::default();
        cfg.tree.n_leaves = Some(8);
        assert!(matches!(cfg.resolve(), Err(ConfigError::Invalid { field: "tree.n_leaves", .. })));
        let mut cfg = RunConfig::default();
        cfg.tree.kind = TreeKind::Cluster;
        cfg.tree.n_clusters = 3;
        assert!(cfg.resolve().is_err());
        let mut cfg = RunConfig::default();
        cfg.loss.tau = -1.0;
        assert!(matches!(cfg.resolve(), Err(ConfigError::Loss(_))));
        let mut cfg = RunConfig::default();
        cfg.seeds.clear();
        assert!(cfg.resolve().is_err());
    }
}
