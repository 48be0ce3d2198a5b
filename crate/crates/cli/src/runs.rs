//! Training, evaluation and ablation drivers.

use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use twassl_core::checkpoint::{load_checkpoint, save_checkpoint};
use twassl_core::config::{EvalMetric, HeadName, RunConfig};
use twassl_core::heads::KeyKind;
use twassl_core::losses::DEFAULT_LAMBDA_JD;
use twassl_core::train::{train_model, Model, RunRecord, Trainer};

use crate::output::{mean_std, write};

/// One trained seed, or the reason it stopped.
#[derive(Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
}

impl SeedOutcome {
    pub fn accuracy(&self) -> Option<f64> {
        self.error.is_none().then(|| self.record.as_ref()?.final_accuracy).flatten()
    }
}

/// Trains `cfg` under `seed`, writing `<stem>.jsonl` (kept for partial runs)
/// and, on success, a `<stem>` checkpoint. Returns the model too.
fn train_one(cfg: &RunConfig, seed: u64, out: &Path, stem: &str) -> (SeedOutcome, Option<Model>) {
    match train_model(cfg, seed) {
        Ok((record, model)) => {
            let mut error = write(out, &format!("{stem}.jsonl"), record.to_jsonl().as_bytes())
                .err()
                .map(|e| format!("{e:#}"));
            if error.is_none() {
                error = save_checkpoint(out, stem, cfg, seed, record.steps, record.epochs.len(), &model)
                    .err()
                    .map(|e| e.to_string());
            }
            (SeedOutcome { seed, record: Some(record), error }, Some(model))
        }
        Err(failure) => {
            if let Some(rec) = &failure.record {
                let _ = write(out, &format!("{stem}.jsonl"), rec.to_jsonl().as_bytes());
            }
            let outcome = SeedOutcome {
                seed,
                record: failure.record.map(|r| *r),
                error: Some(failure.error.to_string()),
            };
            (outcome, None)
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Aggregate {
    pub label: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<Option<f64>>,
    pub mean: f64,
    pub std: f64,
    pub failed: usize,
    pub collapsed: usize,
}

fn aggregate(label: String, outcomes: &[&SeedOutcome]) -> Aggregate {
    let accs: Vec<f64> = outcomes.iter().filter_map(|o| o.accuracy()).collect();
    let (mean, std) = mean_std(&accs);
    Aggregate {
        label,
        seeds: outcomes.iter().map(|o| o.seed).collect(),
        accuracies: outcomes.iter().map(|o| o.accuracy()).collect(),
        mean,
        std,
        failed: outcomes.iter().filter(|o| o.error.is_some()).count(),
        collapsed: outcomes
            .iter()
            .filter(|o| o.record.as_ref().is_some_and(|r| r.collapsed))
            .count(),
    }
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "NA".into(), |v| format!("{v:.6}"))
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<bool> {
    cfg.resolve().context("invalid config")?;
    write(out, "config.toml", cfg.to_toml_string().as_bytes())?;
    let outcomes: Vec<SeedOutcome> = cfg
        .seeds
        .par_iter()
        .map(|&seed| train_one(cfg, seed, out, &format!("run_seed{seed}")).0)
        .collect();

    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["seed", "accuracy", "collapsed", "epochs", "error"])?;
    for o in &outcomes {
        let rec = o.record.as_ref();
        csv.write_record([
            o.seed.to_string(),
            fmt_acc(o.accuracy()),
            rec.is_some_and(|r| r.collapsed).to_string(),
            rec.map_or(0, |r| r.epochs.len()).to_string(),
            o.error.clone().unwrap_or_default(),
        ])?;
        match &o.error {
            None => println!("seed {}: accuracy {}", o.seed, fmt_acc(o.accuracy())),
            Some(e) => eprintln!("seed {}: failed: {e}", o.seed),
        }
    }
    let agg = aggregate(cfg.label(), &outcomes.iter().collect::<Vec<_>>());
    csv.write_record([
        "mean±std".to_string(),
        format!("{:.6}±{:.6}", agg.mean, agg.std),
        agg.collapsed.to_string(),
        String::new(),
        format!("{} failed", agg.failed),
    ])?;
    write(out, "summary.csv", &csv.into_inner()?)?;
    write(out, "aggregate.json", serde_json::to_string_pretty(&agg)?.as_bytes())?;
    println!("{}: {:.4} ± {:.4} over {} seeds", agg.label, agg.mean, agg.std, agg.seeds.len());
    Ok(agg.failed == 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Test,
    Train,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "test" => Ok(Split::Test),
            "train" => Ok(Split::Train),
            _ => Err(format!("unknown split `{s}` (test|train)")),
        }
    }
}

pub fn parse_metric(s: &str) -> Result<EvalMetric, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown metric `{s}` (auto|twd|tv|cosine)"))
}

pub struct EvalRequest<'a> {
    pub checkpoint: &'a Path,
    pub config: Option<RunConfig>,
    pub k: Option<usize>,
    pub metric: Option<EvalMetric>,
    pub split: Split,
    pub seed: Option<u64>,
    pub untrained: bool,
}

#[derive(Debug, Serialize)]
pub struct EvalResult {
    pub checkpoint: String,
    pub label: String,
    pub seed: u64,
    pub k: usize,
    pub metric: String,
    pub split: String,
    pub untrained: bool,
    pub non_default_metric: bool,
    pub accuracy: f64,
}

pub fn cmd_eval(req: EvalRequest<'_>) -> Result<EvalResult> {
    let (manifest, model) = load_checkpoint(req.checkpoint, req.config.as_ref())
        .with_context(|| format!("cannot load {}", req.checkpoint.display()))?;
    let mut cfg = req.config.unwrap_or_else(|| manifest.config.clone());
    if let Some(k) = req.k {
        cfg.eval.k = k;
    }
    if let Some(m) = req.metric {
        cfg.eval.metric = m;
    }
    let run = cfg.resolve()?;
    let seed = req.seed.unwrap_or(manifest.seed);
    let model = if req.untrained { Model::init(&run, seed)? } else { model };
    let non_default = match cfg.eval.metric {
        EvalMetric::Auto => false,
        EvalMetric::Twd => !cfg.loss.objective.uses_twd(),
        EvalMetric::Tv | EvalMetric::Cosine => true,
    };
    if non_default {
        eprintln!("note: metric `{}` is not the default for this objective", run.eval_metric.name());
    }
    let (train_set, test_set) = cfg.load_data(seed)?;
    let query = match req.split {
        Split::Test => &test_set,
        Split::Train => &train_set,
    };
    let k = cfg.eval.k;
    if k > train_set.len() {
        bail!("K = {k} exceeds the {} training rows", train_set.len());
    }
    let metric = run.eval_metric.name().to_string();
    let trainer = Trainer::with_model(run, model);
    let accuracy = trainer.knn_accuracy(&train_set, query, k)?;
    Ok(EvalResult {
        checkpoint: req.checkpoint.display().to_string(),
        label: cfg.label(),
        seed,
        k,
        metric,
        split: format!("{:?}", req.split).to_lowercase(),
        untrained: req.untrained,
        non_default_metric: non_default,
        accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    LambdaJd,
    KnnK,
    Head,
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lambda_jd" => Ok(Axis::LambdaJd),
            "knn_k" => Ok(Axis::KnnK),
            "head" => Ok(Axis::Head),
            _ => Err(format!("unknown axis `{s}` (lambda_jd|knn_k|head)")),
        }
    }
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::LambdaJd => "lambda_jd",
            Axis::KnnK => "knn_k",
            Axis::Head => "head",
        }
    }

    fn default_values(self) -> &'static str {
        match self {
            Axis::LambdaJd => "0.0,0.1,0.2,0.3",
            Axis::KnnK => "10,50",
            Axis::Head => "softmax,softmax+jd",
        }
    }
}

/// Applies a head spec such as `softmax`, `sem+jd` or `af(dct)+jd`.
pub fn apply_head_spec(cfg: &mut RunConfig, spec: &str) -> Result<()> {
    let (base, jd) = match spec.strip_suffix("+jd") {
        Some(b) => (b, true),
        None => (spec, false),
    };
    let (kind, key) = match base {
        "softmax" => (HeadName::Softmax, None),
        "sem" => (HeadName::Sem, None),
        "af" | "arcface" | "af(dct)" => (HeadName::Arcface, Some(KeyKind::Dct)),
        "af(pe)" => (HeadName::Arcface, Some(KeyKind::Pe)),
        "af(learned)" => (HeadName::Arcface, Some(KeyKind::Learned)),
        _ => bail!("unknown head `{spec}` (softmax|sem|af(dct)|af(pe)|af(learned), optional +jd)"),
    };
    cfg.head.kind = kind;
    if let Some(k) = key {
        cfg.head.key = k;
    }
    cfg.loss.lambda_jd = match (jd, cfg.loss.lambda_jd > 0.0) {
        (false, _) => 0.0,
        (true, true) => cfg.loss.lambda_jd,
        (true, false) => DEFAULT_LAMBDA_JD,
    };
    Ok(())
}

struct Cell {
    value: String,
    cfg: RunConfig,
}

fn cells(base: &RunConfig, axis: Axis, values: &str) -> Result<Vec<Cell>> {
    let mut out = Vec::new();
    for v in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let mut cfg = base.clone();
        match axis {
            Axis::LambdaJd => {
                cfg.loss.lambda_jd = v.parse().map_err(|_| anyhow!("lambda_jd value `{v}` is not a number"))?;
            }
            Axis::KnnK => {
                cfg.eval.k = v.parse().map_err(|_| anyhow!("knn_k value `{v}` is not a count"))?;
            }
            Axis::Head => apply_head_spec(&mut cfg, v)?,
        }
        cfg.resolve().with_context(|| format!("{} = {v}", axis.name()))?;
        out.push(Cell { value: v.to_string(), cfg });
    }
    if out.is_empty() {
        bail!("no values given for axis {}", axis.name());
    }
    Ok(out)
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect()
}

pub fn cmd_ablate(base: &RunConfig, axis: Axis, values: Option<&str>, out: &Path) -> Result<bool> {
    let cells = cells(base, axis, values.unwrap_or(axis.default_values()))?;
    write(out, "config.toml", base.to_toml_string().as_bytes())?;

    // knn_k only changes evaluation, so each seed is trained once.
    let results: Vec<Vec<SeedOutcome>> = if axis == Axis::KnnK {
        let trained: Vec<(SeedOutcome, Option<Model>)> = base
            .seeds
            .par_iter()
            .map(|&s| train_one(base, s, out, &format!("knn_seed{s}")))
            .collect();
        cells
            .iter()
            .map(|cell| {
                trained
                    .iter()
                    .map(|(o, model)| rescore(&cell.cfg, o, model.as_ref()))
                    .collect()
            })
            .collect()
    } else {
        let jobs: Vec<(usize, u64)> = (0..cells.len())
            .flat_map(|c| base.seeds.iter().map(move |&s| (c, s)))
            .collect();
        let flat: Vec<(usize, SeedOutcome)> = jobs
            .par_iter()
            .map(|&(c, s)| {
                let stem = format!("{}_{}_seed{s}", axis.name(), slug(&cells[c].value));
                (c, train_one(&cells[c].cfg, s, out, &stem).0)
            })
            .collect();
        let mut grouped: Vec<Vec<SeedOutcome>> = cells.iter().map(|_| Vec::new()).collect();
        for (c, o) in flat {
            grouped[c].push(o);
        }
        grouped
    };

    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["kind", "axis", "value", "seed", "accuracy", "std", "n", "collapsed", "error"])?;
    let mut aggregates = Vec::new();
    for (cell, outcomes) in cells.iter().zip(&results) {
        for o in outcomes {
            csv.write_record([
                "run".to_string(),
                axis.name().into(),
                cell.value.clone(),
                o.seed.to_string(),
                fmt_acc(o.accuracy()),
                String::new(),
                "1".into(),
                o.record.as_ref().is_some_and(|r| r.collapsed).to_string(),
                o.error.clone().unwrap_or_default(),
            ])?;
        }
        let agg = aggregate(cell.value.clone(), &outcomes.iter().collect::<Vec<_>>());
        csv.write_record([
            "aggregate".to_string(),
            axis.name().into(),
            cell.value.clone(),
            String::new(),
            format!("{:.6}", agg.mean),
            format!("{:.6}", agg.std),
            (agg.seeds.len() - agg.failed).to_string(),
            agg.collapsed.to_string(),
            if agg.failed > 0 { format!("{} failed", agg.failed) } else { String::new() },
        ])?;
        println!("{} = {:<14} {:.4} ± {:.4}", axis.name(), cell.value, agg.mean, agg.std);
        aggregates.push(agg);
    }
    write(out, "ablation.csv", &csv.into_inner()?)?;
    write(out, "aggregate.json", serde_json::to_string_pretty(&aggregates)?.as_bytes())?;
    Ok(aggregates.iter().all(|a| a.failed == 0))
}

/// Re-evaluates a trained seed under `cfg`'s K.
fn rescore(cfg: &RunConfig, trained: &SeedOutcome, model: Option<&Model>) -> SeedOutcome {
    let seed = trained.seed;
    let (Some(model), None) = (model, &trained.error) else {
        return SeedOutcome {
            seed,
            record: None,
            error: trained.error.clone().or_else(|| Some("no model".into())),
        };
    };
    let scored = (|| -> Result<f64> {
        let run = cfg.resolve()?;
        let (train_set, test_set) = cfg.load_data(seed)?;
        let k = cfg.eval.k.min(train_set.len());
        Ok(Trainer::with_model(run, model.clone()).knn_accuracy(&train_set, &test_set, k)?)
    })();
    match scored {
        Ok(acc) => {
            let mut record = trained.record.clone();
            if let Some(r) = &mut record {
                r.final_accuracy = Some(acc);
                r.knn_k = cfg.eval.k;
            }
            SeedOutcome { seed, record, error: None }
        }
        Err(e) => SeedOutcome {
            seed,
            record: None,
            error: Some(format!("{e:#}")),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_specs() {
        let mut cfg = RunConfig::default();
        apply_head_spec(&mut cfg, "af(pe)+jd").unwrap();
        assert_eq!(cfg.head.kind, HeadName::Arcface);
        assert_eq!(cfg.head.key, KeyKind::Pe);
        assert_eq!(cfg.loss.lambda_jd, 0.1);
        apply_head_spec(&mut cfg, "softmax").unwrap();
        assert_eq!(cfg.head.kind, HeadName::Softmax);
        assert_eq!(cfg.loss.lambda_jd, 0.0);
        apply_head_spec(&mut cfg, "sem+jd").unwrap();
        assert_eq!(cfg.loss.lambda_jd, DEFAULT_LAMBDA_JD);
        assert!(apply_head_spec(&mut cfg, "mlp").is_err());
    }

    #[test]
    fn axis_cells() {
        let cfg = RunConfig::default();
        let c = cells(&cfg, Axis::LambdaJd, "0.0, 0.1,0.2,0.3").unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c[3].cfg.loss.lambda_jd, 0.3);
        assert!(cells(&cfg, Axis::KnnK, "ten").is_err());
        assert!(cells(&cfg, Axis::LambdaJd, "").is_err());
        assert_eq!(cells(&cfg, Axis::KnnK, Axis::KnnK.default_values()).unwrap()[0].cfg.eval.k, 10);
    }

    #[test]
    fn metric_names() {
        assert_eq!(parse_metric("cosine").unwrap(), EvalMetric::Cosine);
        assert!(parse_metric("l2").is_err());
    }
}
