//! SGD with momentum over the configured objective, with the step-decay
//! schedule shared by the learning rate and the penalty coefficient.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{batch_rng, evaluate_accuracy, AttackConfig, InnerLoss};
use crate::autodiff::Tape;
use crate::data::{split_validation, DatasetSplit};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, PrimaryLoss};
use crate::margin::{margin_report, MarginOptions, MarginSummary};
use crate::model::{ModelSpec, Network, Parameter};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Mnist,
    Cifar10,
}

impl DatasetId {
    pub fn input_shape(self) -> [usize; 3] {
        match self {
            DatasetId::Mnist => [1, 28, 28],
            DatasetId::Cifar10 => [3, 32, 32],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    FinalEpoch,
    BestRobustVal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub dataset: DatasetId,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// 0-based epochs from which the next decay applies.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub loss: LossConfig,
    /// Adversary used during training (AT, TRADES, adversarial penalty
    /// input); `None` for standard training.
    pub train_attack: Option<AttackConfig>,
    pub eval_attack: AttackConfig,
    pub validation_size: usize,
    pub selection: Selection,
    /// Samples used for per-epoch accuracy, robustness and margin curves.
    pub monitor_samples: usize,
    /// Train on the first `n` training samples only.
    pub train_subset: Option<usize>,
    /// Random 4-pixel-padded crops and horizontal flips.
    pub augment: bool,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// MLP on MNIST: 50 epochs, batch 100, learning rate 0.01 divided by 10
    /// at epoch 30, evaluated under PGD20 (ε = 0.1, α = 0.01).
    pub fn mnist_mlp4() -> Self {
        let eval_attack = AttackConfig::pgd(0.1, 0.01, 20);
        TrainConfig {
            model: ModelSpec::mlp4(DatasetId::Mnist.input_shape(), 10),
            dataset: DatasetId::Mnist,
            epochs: 50,
            batch_size: 100,
            lr: 0.01,
            momentum: 0.9,
            lr_decay_epochs: vec![30],
            lr_decay_factor: 10.0,
            loss: LossConfig::default(),
            train_attack: None,
            eval_attack,
            validation_size: 0,
            selection: Selection::FinalEpoch,
            monitor_samples: 1000,
            train_subset: None,
            augment: false,
            eval_batch_size: 500,
            seed: 0,
        }
    }

    /// CNN on CIFAR-10: 100 epochs, batch 100, learning rate 0.01 divided by
    /// 10 at epochs 75 and 90, evaluated under PGD10 (ε = 0.031, α = 0.0078).
    pub fn cifar10_cnn4() -> Self {
        TrainConfig {
            model: ModelSpec::cnn4(DatasetId::Cifar10.input_shape(), 10),
            dataset: DatasetId::Cifar10,
            epochs: 100,
            lr_decay_epochs: vec![75, 90],
            eval_attack: AttackConfig::pgd(0.031, 0.0078, 10),
            eval_batch_size: 200,
            ..Self::mnist_mlp4()
        }
    }

    /// The training adversary: the evaluation attack with a random start,
    /// and the KL objective for TRADES.
    pub fn default_train_attack(&self) -> AttackConfig {
        let inner = match self.loss.primary {
            PrimaryLoss::Trades { .. } => InnerLoss::KlToClean,
            _ => InnerLoss::Xe,
        };
        self.eval_attack.with_random_start(true).with_inner_loss(inner)
    }

    /// Checks everything except the match between model and dataset, which
    /// [`train_with`] verifies against the actual splits.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.layers()?;
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("epochs, batch_size and eval_batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor >= 1.0) {
            return bad(format!("lr_decay_factor must be >= 1, got {}", self.lr_decay_factor));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("lr_decay_epochs must be strictly increasing: {:?}", self.lr_decay_epochs));
        }
        if let Some(&last) = self.lr_decay_epochs.last() {
            if last >= self.epochs {
                return bad(format!("lr decay epoch {last} is not below epochs = {}", self.epochs));
            }
        }
        self.loss.validate()?;
        self.eval_attack.validate()?;
        match (&self.train_attack, self.loss.requires_adversarial()) {
            (Some(a), _) => a.validate()?,
            (None, true) => return bad("the loss needs adversarial examples but train_attack is not set".into()),
            (None, false) => {}
        }
        if self.selection == Selection::BestRobustVal && self.validation_size == 0 {
            return bad("best_robust_val selection needs validation_size > 0".into());
        }
        Ok(())
    }

    /// Multiplier applied to both the learning rate and the penalty
    /// coefficient at (0-based) `epoch`.
    pub fn schedule_factor(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&m| epoch >= m).count();
        self.lr_decay_factor.powi(-(decays as i32))
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.schedule_factor(epoch)
    }

    pub fn penalty_lambda_at(&self, epoch: usize) -> f64 {
        self.loss.regularizer.lambda() * self.schedule_factor(epoch)
    }
}

/// Heavy-ball state: `v ← μv + g; θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T> {
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(params: &[Parameter<T>], momentum: f64) -> Self {
        SgdMomentum {
            momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Parameter<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        let mut values: Vec<&mut Tensor<T>> = params.iter_mut().map(|p| &mut p.value).collect();
        sgd_momentum_step(&mut values, grads, &mut self.velocity, lr, self.momentum)
    }
}

/// One heavy-ball update in place.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &mut [Tensor<T>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape("sgd", format!("{} params, {} grads, {} velocities", params.len(), grads.len(), velocity.len())));
    }
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape("sgd", format!("param {:?}, grad {:?}", p.shape(), g.shape())));
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + gv;
            *pv = *pv - lr * *vv;
        }
    }
    Ok(())
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub schedule_factor: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub robust_test_accuracy: f64,
    pub robust_val_accuracy: Option<f64>,
    pub margin_train: Option<MarginSummary>,
    pub margin_test: Option<MarginSummary>,
    pub wall_seconds: f64,
}

/// Loss decomposition of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub batch: usize,
    pub total: f64,
    pub primary: f64,
    pub weight_decay: f64,
    pub penalty: f64,
    pub weight_decay_coef: f64,
    pub penalty_coef: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepLog>,
}

pub struct TrainOutcome<T> {
    pub network: Network<T>,
    pub metrics: RunMetrics,
    /// Epoch whose parameters were returned.
    pub selected_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainOptions {
    /// Keep a [`StepLog`] for every optimizer step.
    pub log_steps: bool,
}

const SHUFFLE_SALT: u64 = 0x5348_5546;
const ATTACK_SALT: u64 = 0x4154_5443;
const AUGMENT_SALT: u64 = 0x4155_474d;

fn epoch_rng(seed: u64, salt: u64, epoch: usize) -> ChaCha8Rng {
    batch_rng(seed ^ salt, epoch as u64)
}

/// Pads by 4 with zeros, crops back at a random offset and flips half of
/// the images horizontally.
pub fn augment_batch<T: Scalar>(x: &Tensor<T>, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("augment", format!("expected N×C×H×W, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let pad = 4i64;
    let mut out = Tensor::zeros(s.to_vec());
    for i in 0..n {
        let dy = rng.random_range(-pad..=pad);
        let dx = rng.random_range(-pad..=pad);
        let flip = rng.random_bool(0.5);
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                let sy = y as i64 + dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for xo in 0..w {
                    let xs = if flip { w - 1 - xo } else { xo } as i64 + dx;
                    if xs < 0 || xs >= w as i64 {
                        continue;
                    }
                    out.data_mut()[base + y * w + xo] = x.data()[base + sy as usize * w + xs as usize];
                }
            }
        }
    }
    Ok(out)
}

/// Clean and robust accuracy under `attack`, deterministic for attacks
/// without a random start.
pub fn evaluate<T: Scalar>(net: &Network<T>, split: &DatasetSplit<T>, attack: &AttackConfig, batch_size: usize) -> Result<(f64, f64)> {
    evaluate_accuracy(net, split, attack, batch_size, 0)
}

fn divergence<T: Scalar>(epoch: usize, batch: usize, what: &str, net: &Network<T>, lr: f64, terms: Option<(f64, f64, f64)>) -> Error {
    let mut detail = format!("{what}; lr={lr}, ‖θ‖²={}", net.squared_norm());
    if let Some((p, wd, pen)) = terms {
        detail.push_str(&format!(", primary={p}, weight_decay={wd}, penalty={pen}"));
    }
    for p in net.params() {
        let max = p.value.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
        detail.push_str(&format!(", max|{}|={max}", p.name));
    }
    Error::Divergence { epoch, batch, detail }
}

pub fn train<T: Scalar>(cfg: &TrainConfig, train: &DatasetSplit<T>, test: &DatasetSplit<T>) -> Result<TrainOutcome<T>> {
    train_with(cfg, train, test, TrainOptions::default(), |_, _| Ok(()))
}

/// Runs the full loop; `observer` sees every finished epoch.
pub fn train_with<T: Scalar>(
    cfg: &TrainConfig,
    train: &DatasetSplit<T>,
    test: &DatasetSplit<T>,
    options: TrainOptions,
    mut observer: impl FnMut(&EpochMetrics, &Network<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let expected = &cfg.model.input_shape[..];
    for (name, split) in [("train", train), ("test", test)] {
        if split.sample_shape() != expected || split.num_classes != cfg.model.num_classes {
            return Err(Error::Config(format!(
                "{name} split has samples {:?} with {} classes, model expects {:?} with {}",
                split.sample_shape(),
                split.num_classes,
                expected,
                cfg.model.num_classes
            )));
        }
    }
    let train = match cfg.train_subset {
        Some(n) => train.take(n)?,
        None => train.clone(),
    };
    let (train, val) = split_validation(&train, cfg.validation_size, cfg.seed)?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let monitor_train = train.take(cfg.monitor_samples)?;
    let monitor_test = test.take(cfg.monitor_samples)?;

    let mut net = Network::<T>::init(&cfg.model, cfg.seed)?;
    let mut opt = SgdMomentum::new(net.params(), cfg.momentum);
    let train_attack = cfg.train_attack;
    let n = train.len();
    let num_batches = n.div_ceil(cfg.batch_size);
    let mut metrics = RunMetrics::default();
    let mut best: Option<(f64, usize, Network<T>)> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let factor = cfg.schedule_factor(epoch);
        let lr = cfg.lr * factor;
        let loss_cfg = cfg.loss.with_penalty_factor(factor);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, SHUFFLE_SALT, epoch));
        let mut augment_rng = epoch_rng(cfg.seed, AUGMENT_SALT, epoch);
        let mut loss_sum = 0.0;

        for b in 0..num_batches {
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let batch = train.select(idx)?;
            let mut x = batch.images;
            if cfg.augment {
                x = augment_batch(&x, &mut augment_rng)?;
            }
            let labels = &batch.labels;
            let x_adv = match (&train_attack, loss_cfg.requires_adversarial()) {
                (Some(attack), true) => {
                    let mut rng = batch_rng(cfg.seed ^ ATTACK_SALT, (epoch * num_batches + b) as u64);
                    Some(crate::attacks::perturb(&net, &x, labels, attack, &mut rng)?)
                }
                _ => None,
            };

            let tape = Tape::new();
            let bound = net.trainable(&tape);
            let terms = total_loss(&loss_cfg, &bound, &x, labels, x_adv.as_ref())?;
            let total = terms.total.value().item().as_f64();
            let parts = (terms.primary, terms.weight_decay, terms.penalty);
            if !total.is_finite() {
                return Err(divergence(epoch, b, &format!("non-finite loss {total}"), &net, lr, Some(parts)));
            }
            let grads: Vec<Tensor<T>> = terms
                .total
                .grad_wrt(&bound.params, false)?
                .iter()
                .map(|g| (*g.value()).clone())
                .collect();
            if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
                let what = format!("non-finite gradient for {}", net.params()[i].name);
                return Err(divergence(epoch, b, &what, &net, lr, Some(parts)));
            }
            drop(bound);
            opt.step(net.params_mut(), &grads, lr)?;
            loss_sum += total;
            if options.log_steps {
                metrics.steps.push(StepLog {
                    epoch,
                    batch: b,
                    total,
                    primary: terms.primary,
                    weight_decay: terms.weight_decay,
                    penalty: terms.penalty,
                    weight_decay_coef: loss_cfg.weight_decay,
                    penalty_coef: loss_cfg.regularizer.lambda(),
                });
            }
        }

        let eb = cfg.eval_batch_size;
        let margin_opts = MarginOptions {
            batch_size: eb,
            ..MarginOptions::default()
        };
        let (train_accuracy, _) = evaluate(&net, &monitor_train, &cfg.eval_attack.with_epsilon(0.0), eb)?;
        let (test_accuracy, robust_test_accuracy) = evaluate(&net, &monitor_test, &cfg.eval_attack, eb)?;
        let robust_val_accuracy = if val.is_empty() {
            None
        } else {
            Some(evaluate(&net, &val, &cfg.eval_attack, eb)?.1)
        };
        let row = EpochMetrics {
            epoch,
            lr,
            lambda: loss_cfg.regularizer.lambda(),
            schedule_factor: factor,
            train_loss: loss_sum / num_batches as f64,
            train_accuracy,
            test_accuracy,
            robust_test_accuracy,
            robust_val_accuracy,
            margin_train: margin_report(&net, &monitor_train, "train", &margin_opts)?.summary,
            margin_test: margin_report(&net, &monitor_test, "test", &margin_opts)?.summary,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if let (Selection::BestRobustVal, Some(v)) = (cfg.selection, robust_val_accuracy) {
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, net.clone()));
            }
        }
        observer(&row, &net)?;
        metrics.epochs.push(row);
    }

    let (network, selected_epoch) = match best {
        Some((_, epoch, snapshot)) => (snapshot, epoch),
        None => (net, cfg.epochs - 1),
    };
    Ok(TrainOutcome {
        network,
        metrics,
        selected_epoch,
    })
}
