//! Run configuration documents, the shipped table presets, result files
//! and the end-to-end training driver behind `emr train`.
//!
//! A run document is TOML. Every key is optional: values come from the
//! named `preset`, or from the dataset preset when no preset is named, and
//! the document overrides them key by key.
//!
//! ```toml
//! config_version = 1
//! preset = "table1-st-emr"
//! data_dir = "data/mnist"
//! output_dir = "runs/st-emr"
//! precision = "f32"
//!
//! [train]
//! seed = 3
//! epochs = 20
//!
//! [train.loss.regularizer]
//! kind = "emr_approx"
//! lambda = 0.1
//! temperature = 1.0
//! ```
//!
//! Output directory layout:
//!
//! | file | content |
//! |------|---------|
//! | `config.toml` | the fully resolved document; rerunning it reproduces the run |
//! | `metrics.csv` | one row per epoch |
//! | `steps.csv` | one row per optimizer step with the loss decomposition |
//! | `timing.csv` | wall-clock seconds per epoch |
//! | `checkpoints/model.ckpt` | the selected network |
//! | `checkpoints/epoch_NNN.ckpt` | periodic snapshots when `checkpoint_every > 0` |
//! | `margins.csv` | per-sample effective margins on the test split |
//! | `summary.json` | the numbers of the summary line |
//! | `sweep.csv` | written by `emr sweep` |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::SweepPoint;
use crate::data::{load_cifar10, load_mnist, save_checkpoint, DatasetSplit};
use crate::error::{Error, Result};
use crate::losses::{InputSource, LossConfig, PrimaryLoss, Regularizer};
use crate::margin::{margin_report, MarginOptions, MarginReport, MarginSummary};
use crate::tensor::Scalar;
use crate::trainer::{evaluate, train_with, DatasetId, RunMetrics, TrainConfig, TrainOptions};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// One training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Schema version; must be 1.
    pub config_version: u32,
    /// Preset the document was resolved from, if any.
    pub preset: Option<String>,
    /// Directory with the raw dataset files (default `data/mnist` or
    /// `data/cifar10`).
    pub data_dir: PathBuf,
    /// Default `runs/<preset>` or `runs/<dataset>`.
    pub output_dir: PathBuf,
    /// Training precision, default `f32`. `f64` gives bitwise reproducible
    /// reruns.
    pub precision: Precision,
    /// Samples of each split used for the final margin statistics; 0 means
    /// the whole split.
    pub margin_samples: usize,
    /// Save a snapshot every this many epochs; 0 keeps only the selected
    /// network.
    pub checkpoint_every: usize,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Defaults for a dataset: the MNIST/mlp4 or CIFAR-10/cnn4 protocol with
    /// plain cross-entropy.
    pub fn for_dataset(dataset: DatasetId) -> Self {
        let (train, name) = match dataset {
            DatasetId::Mnist => (TrainConfig::mnist_mlp4(), "mnist"),
            DatasetId::Cifar10 => (TrainConfig::cifar10_cnn4(), "cifar10"),
        };
        RunConfig {
            config_version: CONFIG_VERSION,
            preset: None,
            data_dir: PathBuf::from("data").join(name),
            output_dir: PathBuf::from("runs").join(name),
            precision: Precision::F32,
            margin_samples: 0,
            checkpoint_every: 0,
            train,
        }
    }

    /// Every problem with the document, one entry each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.config_version != CONFIG_VERSION {
            out.push(format!(
                "config_version: unsupported version {} (expected {CONFIG_VERSION})",
                self.config_version
            ));
        }
        let t = &self.train;
        if t.model.input_shape != t.dataset.input_shape() {
            out.push(format!(
                "train.model.input_shape: {:?} does not match dataset {:?} ({:?})",
                t.model.input_shape,
                t.dataset,
                t.dataset.input_shape()
            ));
        }
        if t.model.num_classes != 10 {
            out.push(format!("train.model.num_classes: both datasets have 10 classes, got {}", t.model.num_classes));
        }
        if t.seed > i64::MAX as u64 {
            out.push("train.seed: must fit in a signed 64-bit integer".into());
        }
        if let Err(e) = t.validate() {
            out.push(format!("train: {e}"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// The resolved document, as echoed into the output directory.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }
}

fn to_table(cfg: &RunConfig) -> Result<toml::Table> {
    toml::Table::try_from(cfg).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
}

/// Overlays `over` on `base`. A table whose `kind` changes replaces the
/// old table instead of merging with it; the string `"none"` removes an
/// optional entry such as `train_attack`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (_, toml::Value::String(s)) if s == "none" && key != "kind" => {
                base.remove(&key);
            }
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                let kind_changed = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
                if kind_changed {
                    *b = o;
                } else {
                    merge(b, o);
                }
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Parses and resolves a run document. Unknown keys and invalid values are
/// reported together in one [`Error::Config`].
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("not a valid TOML document: {e}")))?;
    let mut base = match doc.get("preset") {
        Some(toml::Value::String(name)) => preset(name).ok_or_else(|| {
            Error::Config(format!("preset: unknown preset {name:?}; available: {}", preset_names().join(", ")))
        })?,
        Some(other) => return Err(Error::Config(format!("preset: expected a string, got {other}"))),
        None => {
            let dataset = doc
                .get("train")
                .and_then(|t| t.get("dataset"))
                .and_then(|d| d.as_str())
                .unwrap_or("mnist");
            match dataset {
                "cifar10" => RunConfig::for_dataset(DatasetId::Cifar10),
                _ => RunConfig::for_dataset(DatasetId::Mnist),
            }
        }
    };
    if let Some(name) = &base.preset {
        if doc.get("output_dir").is_none() {
            base.output_dir = PathBuf::from("runs").join(name);
        }
    }
    let mut merged = to_table(&base)?;
    merge(&mut merged, doc);

    let mut unknown = Vec::new();
    let parsed: std::result::Result<RunConfig, _> =
        serde_ignored::deserialize(toml::Value::Table(merged), |path| unknown.push(path.to_string()));
    let mut problems: Vec<String> = unknown.iter().map(|k| format!("{k}: unknown key")).collect();
    match parsed {
        Ok(cfg) => {
            problems.extend(cfg.problems());
            if problems.is_empty() {
                Ok(cfg)
            } else {
                Err(Error::Config(problems.join("; ")))
            }
        }
        Err(e) => {
            problems.push(e.to_string().trim().to_string());
            Err(Error::Config(problems.join("; ")))
        }
    }
}

pub fn load_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_config(&text)
}

#[derive(Debug, Clone, Copy)]
enum Method {
    Wd,
    Lsoftmax(u32),
    Emr(f64),
    ApproxEmr(f64, f64),
}

#[derive(Debug, Clone, Copy)]
struct Row {
    name: &'static str,
    dataset: DatasetId,
    adversarial: bool,
    method: Method,
    weight_decay: f64,
}

const fn row(name: &'static str, dataset: DatasetId, adversarial: bool, method: Method, weight_decay: f64) -> Row {
    Row {
        name,
        dataset,
        adversarial,
        method,
        weight_decay,
    }
}

use DatasetId::{Cifar10 as C, Mnist as M};
use Method::{ApproxEmr, Emr, Lsoftmax, Wd};

/// MLP rows use an L-Softmax margin of 4; the CNN rows use 1 because larger
/// margins do not converge.
const ROWS: &[Row] = &[
    row("table1-st-wd1e-1", M, false, Wd, 1e-1),
    row("table1-st-wd1e-2", M, false, Wd, 1e-2),
    row("table1-st-wd1e-3", M, false, Wd, 1e-3),
    row("table1-st-wd1e-4", M, false, Wd, 1e-4),
    row("table1-st-lsoftmax-wd1e-1", M, false, Lsoftmax(4), 1e-1),
    row("table1-st-lsoftmax-wd1e-2", M, false, Lsoftmax(4), 1e-2),
    row("table1-st-lsoftmax-wd1e-3", M, false, Lsoftmax(4), 1e-3),
    row("table1-st-lsoftmax-wd1e-4", M, false, Lsoftmax(4), 1e-4),
    row("table1-st-emr", M, false, Emr(0.1), 1e-3),
    row("table1-at-wd1e-2", M, true, Wd, 1e-2),
    row("table1-at-wd1e-3", M, true, Wd, 1e-3),
    row("table1-at-wd1e-4", M, true, Wd, 1e-4),
    row("table1-at-lsoftmax-wd1e-2", M, true, Lsoftmax(4), 1e-2),
    row("table1-at-lsoftmax-wd1e-3", M, true, Lsoftmax(4), 1e-3),
    row("table1-at-lsoftmax-wd1e-4", M, true, Lsoftmax(4), 1e-4),
    row("table1-at-emr", M, true, Emr(3e-4), 1e-3),
    row("table2-st-wd1e-2", C, false, Wd, 1e-2),
    row("table2-st-wd1e-3", C, false, Wd, 1e-3),
    row("table2-st-wd1e-4", C, false, Wd, 1e-4),
    row("table2-st-lsoftmax-wd1e-2", C, false, Lsoftmax(1), 1e-2),
    row("table2-st-lsoftmax-wd1e-3", C, false, Lsoftmax(1), 1e-3),
    row("table2-st-lsoftmax-wd1e-4", C, false, Lsoftmax(1), 1e-4),
    row("table2-st-emr", C, false, Emr(1e-2), 5e-4),
    row("table2-at-wd1e-2", C, true, Wd, 1e-2),
    row("table2-at-wd1e-3", C, true, Wd, 1e-3),
    row("table2-at-wd1e-4", C, true, Wd, 1e-4),
    row("table2-at-lsoftmax-wd1e-2", C, true, Lsoftmax(1), 1e-2),
    row("table2-at-lsoftmax-wd1e-3", C, true, Lsoftmax(1), 1e-3),
    row("table2-at-lsoftmax-wd1e-4", C, true, Lsoftmax(1), 1e-4),
    row("table2-at-emr", C, true, Emr(1e-3), 5e-4),
    row("table7-mlp-st-approx-emr", M, false, ApproxEmr(1.0, 1.0), 1e-3),
    row("table7-mlp-at-approx-emr", M, true, ApproxEmr(3e-4, 1.0), 1e-3),
    row("table7-cnn-st-approx-emr", C, false, ApproxEmr(30.0, 1.0), 5e-4),
    row("table7-cnn-at-approx-emr", C, true, ApproxEmr(3e-4, 1.0), 5e-4),
];

pub fn preset_names() -> Vec<&'static str> {
    ROWS.iter().map(|r| r.name).collect()
}

/// The shipped configuration for a table row, e.g. `table1-st-emr`.
pub fn preset(name: &str) -> Option<RunConfig> {
    let r = ROWS.iter().find(|r| r.name == name)?;
    let mut cfg = RunConfig::for_dataset(r.dataset);
    cfg.preset = Some(r.name.to_string());
    cfg.output_dir = PathBuf::from("runs").join(r.name);
    let t = &mut cfg.train;
    let source = if r.adversarial { InputSource::Adversarial } else { InputSource::Clean };
    let (primary, regularizer) = match r.method {
        Method::Wd => (PrimaryLoss::Xe, Regularizer::None),
        Method::Lsoftmax(m) => (PrimaryLoss::Lsoftmax { m }, Regularizer::None),
        Method::Emr(lambda) => (PrimaryLoss::Xe, Regularizer::EmrExact { lambda }),
        Method::ApproxEmr(lambda, temperature) => (PrimaryLoss::Xe, Regularizer::EmrApprox { lambda, temperature }),
    };
    t.loss = LossConfig {
        primary,
        primary_input: source,
        weight_decay: r.weight_decay,
        regularizer,
        emr_input: source,
    };
    if r.adversarial {
        t.train_attack = Some(t.default_train_attack());
    }
    Some(cfg)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn summary_cells(s: Option<MarginSummary>) -> String {
    format!("{},{}", opt(s.map(|s| s.mean)), opt(s.map(|s| s.std)))
}

/// One row per epoch. Empty cells mark values that were not computed.
pub fn metrics_csv(metrics: &RunMetrics) -> String {
    let mut out = String::from(
        "epoch,lr,lambda,schedule_factor,train_loss,train_accuracy,test_accuracy,robust_test_accuracy,\
         robust_val_accuracy,margin_train_mean,margin_train_std,margin_test_mean,margin_test_std\n",
    );
    for e in &metrics.epochs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.lr,
            e.lambda,
            e.schedule_factor,
            e.train_loss,
            e.train_accuracy,
            e.test_accuracy,
            e.robust_test_accuracy,
            opt(e.robust_val_accuracy),
            summary_cells(e.margin_train),
            summary_cells(e.margin_test),
        );
    }
    out
}

pub fn steps_csv(metrics: &RunMetrics) -> String {
    let mut out = String::from("epoch,batch,total,primary,weight_decay,penalty,weight_decay_coef,penalty_coef\n");
    for s in &metrics.steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.epoch, s.batch, s.total, s.primary, s.weight_decay, s.penalty, s.weight_decay_coef, s.penalty_coef
        );
    }
    out
}

pub fn timing_csv(metrics: &RunMetrics) -> String {
    let mut out = String::from("epoch,wall_seconds\n");
    for e in &metrics.epochs {
        let _ = writeln!(out, "{},{}", e.epoch, e.wall_seconds);
    }
    out
}

/// `index,label,prediction,margin`; infinite margins are written as `inf`.
pub fn margins_csv(report: &MarginReport) -> String {
    let mut out = String::from("index,label,prediction,margin\n");
    for s in &report.per_sample {
        let _ = writeln!(out, "{},{},{},{}", s.index, s.label, s.prediction, s.margin);
    }
    out
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("epsilon,robust_accuracy\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p.epsilon, p.robust_accuracy);
    }
    out
}

#[derive(Serialize)]
struct MarginSummaryDoc<'a> {
    split: &'a str,
    mean: Option<f64>,
    std: Option<f64>,
    count_used: usize,
    count_total: usize,
    degenerate: usize,
}

/// `{"split": .., "mean": .., "std": .., "count_used": .., ...}`.
pub fn margin_summary_json(report: &MarginReport) -> String {
    let doc = MarginSummaryDoc {
        split: &report.split,
        mean: report.summary.map(|s| s.mean),
        std: report.summary.map(|s| s.std),
        count_used: report.count_used,
        count_total: report.count_total,
        degenerate: report.degenerate,
    };
    serde_json::to_string_pretty(&doc).expect("plain struct serializes")
}

/// The table columns of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub preset: Option<String>,
    pub attack: String,
    pub selected_epoch: usize,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    pub margin_train_mean: Option<f64>,
    pub margin_train_std: Option<f64>,
    pub margin_test_mean: Option<f64>,
    pub margin_test_std: Option<f64>,
}

fn pm(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.2}±{s:.2}"),
        _ => "n/a".into(),
    }
}

impl RunSummary {
    /// e.g. `clean 98.41%  pgd20(eps=0.1,alpha=0.01) 24.41%  m_train 1.11±0.51  m_test 1.12±0.53`.
    pub fn line(&self) -> String {
        format!(
            "clean {:.2}%  {} {:.2}%  m_train {}  m_test {}",
            100.0 * self.clean_accuracy,
            self.attack,
            100.0 * self.robust_accuracy,
            pm(self.margin_train_mean, self.margin_train_std),
            pm(self.margin_test_mean, self.margin_test_std),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

pub fn write_file(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Loads the train and test splits of `dataset` from `dir`.
pub fn load_dataset<T: Scalar>(dataset: DatasetId, dir: &Path) -> Result<(DatasetSplit<T>, DatasetSplit<T>)> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    match dataset {
        DatasetId::Mnist => load_mnist(dir),
        DatasetId::Cifar10 => load_cifar10(dir),
    }
}

/// Trains, evaluates and writes the full output directory of one run.
pub fn execute_run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => execute_typed::<f32>(cfg),
        Precision::F64 => execute_typed::<f64>(cfg),
    }
}

fn execute_typed<T: Scalar>(cfg: &RunConfig) -> Result<RunSummary> {
    let (train, test) = load_dataset::<T>(cfg.train.dataset, &cfg.data_dir)?;
    execute_on(cfg, &train, &test)
}

/// [`execute_run`] on splits that are already in memory.
pub fn execute_on<T: Scalar>(cfg: &RunConfig, train: &DatasetSplit<T>, test: &DatasetSplit<T>) -> Result<RunSummary> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    write_file(out.join("config.toml"), &cfg.to_toml()?)?;
    let ckpt_dir = out.join("checkpoints");
    let every = cfg.checkpoint_every;
    let outcome = train_with(&cfg.train, train, test, TrainOptions { log_steps: true }, |m, net| {
        if every > 0 && (m.epoch + 1) % every == 0 {
            save_checkpoint(net, ckpt_dir.join(format!("epoch_{:03}.ckpt", m.epoch + 1)))?;
        }
        Ok(())
    })?;
    let net = &outcome.network;
    save_checkpoint(net, ckpt_dir.join("model.ckpt"))?;
    write_file(out.join("metrics.csv"), &metrics_csv(&outcome.metrics))?;
    write_file(out.join("steps.csv"), &steps_csv(&outcome.metrics))?;
    write_file(out.join("timing.csv"), &timing_csv(&outcome.metrics))?;

    let t = &cfg.train;
    let (clean, robust) = evaluate(net, test, &t.eval_attack, t.eval_batch_size)?;
    let opts = MarginOptions {
        sample_cap: (cfg.margin_samples > 0).then_some(cfg.margin_samples),
        batch_size: t.eval_batch_size,
        bias_augmented: false,
    };
    let train_used = match t.train_subset {
        Some(n) => train.take(n)?,
        None => train.clone(),
    };
    let m_train = margin_report(net, &train_used, "train", &opts)?;
    let m_test = margin_report(net, test, "test", &opts)?;
    write_file(out.join("margins.csv"), &margins_csv(&m_test))?;
    let summary = RunSummary {
        preset: cfg.preset.clone(),
        attack: t.eval_attack.label(),
        selected_epoch: outcome.selected_epoch,
        clean_accuracy: clean,
        robust_accuracy: robust,
        margin_train_mean: m_train.summary.map(|s| s.mean),
        margin_train_std: m_train.summary.map(|s| s.std),
        margin_test_mean: m_test.summary.map(|s| s.mean),
        margin_test_std: m_test.summary.map(|s| s.std),
    };
    write_file(out.join("summary.json"), &summary.to_json())?;
    Ok(summary)
}

/// Parses a CSV written by this module into header and rows.
pub fn read_csv(text: &str) -> (Vec<String>, Vec<BTreeMap<String, String>>) {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or("").split(',').map(str::to_string).collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| header.iter().cloned().zip(l.split(',').map(str::to_string)).collect())
        .collect();
    (header, rows)
}
