//! l∞ attacks: FGSM and PGD with sign steps, plus robust accuracy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, kl_divergence};
use crate::model::{strict_prediction, ForwardMode, Network};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

/// Objective the attacker ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerLoss {
    #[default]
    Xe,
    /// `KL(softmax(f(x_t)) ‖ softmax(f(x)))`, the TRADES adversary.
    KlToClean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    /// Ignored for FGSM, which always steps by `epsilon`.
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "one")]
    pub steps: usize,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub inner_loss: InnerLoss,
}

fn one() -> usize {
    1
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            alpha: epsilon,
            steps: 1,
            random_start: false,
            inner_loss: InnerLoss::Xe,
        }
    }

    pub fn pgd(epsilon: f64, alpha: f64, steps: usize) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon,
            alpha,
            steps,
            random_start: false,
            inner_loss: InnerLoss::Xe,
        }
    }

    pub fn with_random_start(mut self, random_start: bool) -> Self {
        self.random_start = random_start;
        self
    }

    pub fn with_inner_loss(mut self, inner_loss: InnerLoss) -> Self {
        self.inner_loss = inner_loss;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// The PGD iteration this config runs; FGSM is one unprojected-start
    /// step of size `epsilon`.
    pub fn resolved(&self) -> Self {
        match self.kind {
            AttackKind::Fgsm => AttackConfig {
                kind: AttackKind::Pgd,
                alpha: self.epsilon,
                steps: 1,
                random_start: false,
                ..*self
            },
            AttackKind::Pgd => *self,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolved();
        if !(r.epsilon.is_finite() && r.epsilon >= 0.0) {
            return Err(Error::Config(format!("attack epsilon must be >= 0, got {}", r.epsilon)));
        }
        if r.steps == 0 {
            return Err(Error::Config("attack steps must be >= 1".into()));
        }
        if !(r.alpha.is_finite() && (r.alpha > 0.0 || r.epsilon == 0.0)) {
            return Err(Error::Config(format!("attack step size alpha must be > 0, got {}", r.alpha)));
        }
        Ok(())
    }

    /// e.g. `pgd20(eps=0.1,alpha=0.01)`.
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::Fgsm => format!("fgsm(eps={})", self.epsilon),
            AttackKind::Pgd => format!("pgd{}(eps={},alpha={})", self.steps, self.epsilon, self.alpha),
        }
    }
}

/// Independent random stream for batch `batch` of a run seeded with `seed`.
pub fn batch_rng(seed: u64, batch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch);
    rng
}

/// Clamps `z` into the `epsilon` ball around `x`, then into `[0, 1]`.
pub fn project<T: Scalar>(z: &Tensor<T>, x: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
    let eps = T::of(epsilon);
    z.zip_map(x, "project", |zv, xv| {
        let lo = (xv - eps).max(T::zero());
        let hi = (xv + eps).min(T::one());
        zv.max(lo).min(hi)
    })
}

fn check_unit_range<T: Scalar>(x: &Tensor<T>) -> Result<()> {
    if let Some(i) = x.data().iter().position(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::Usage(format!("attack input has value {} at {i}, outside [0, 1]", x.data()[i])));
    }
    Ok(())
}

/// Gradient of the summed inner loss with respect to the input batch.
fn inner_gradient<T: Scalar>(net: &Network<T>, x_t: &Tensor<T>, labels: &[usize], clean: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let bound = net.frozen(&tape);
    let (xv, logits) = bound.forward_input(x_t, ForwardMode::Eval)?;
    let loss = match clean {
        None => cross_entropy(logits, labels)?,
        Some(c) => kl_divergence(logits, tape.constant(c.clone()))?,
    };
    let g = loss.grad_wrt(&[xv], false)?[0].value();
    Ok((*g).clone())
}

/// Adversarial version of `x` under `cfg`. `rng` is used only for the
/// random start.
pub fn perturb<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    check_unit_range(x)?;
    let cfg = cfg.resolved();
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let clean_logits = match cfg.inner_loss {
        InnerLoss::Xe => None,
        InnerLoss::KlToClean => Some(net.forward(x)?),
    };
    let mut x_t = x.clone();
    if cfg.random_start {
        let noise: Vec<T> = (0..x.len()).map(|_| T::of(rng.random_range(-cfg.epsilon..=cfg.epsilon))).collect();
        x_t = project(&x.add(&Tensor::new(x.shape().to_vec(), noise)?)?, x, cfg.epsilon)?;
    }
    let alpha = T::of(cfg.alpha);
    for _ in 0..cfg.steps {
        let g = inner_gradient(net, &x_t, labels, clean_logits.as_ref())?;
        let stepped = x_t.zip_map(&g, "pgd step", |v, gv| {
            if gv > T::zero() {
                v + alpha
            } else if gv < T::zero() {
                v - alpha
            } else {
                v
            }
        })?;
        x_t = project(&stepped, x, cfg.epsilon)?;
    }
    Ok(x_t)
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Vec<bool> {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| strict_prediction(&logits.data()[i * k..(i + 1) * k], y) == y)
        .collect()
}

/// Fraction of samples classified correctly; ties count as errors.
pub fn clean_accuracy<T: Scalar>(net: &Network<T>, split: &DatasetSplit<T>, batch_size: usize) -> Result<f64> {
    let bs = batch_size.max(1);
    let mut correct = 0usize;
    for start in (0..split.len()).step_by(bs) {
        let (x, labels) = split.batch(start, (start + bs).min(split.len()))?;
        correct += count_correct(&net.forward(&x)?, labels).iter().filter(|&&c| c).count();
    }
    Ok(correct as f64 / split.len().max(1) as f64)
}

/// Clean and robust accuracy in one pass. A sample is robust when it is
/// classified correctly both before and after the attack, since the
/// attacker may always leave a misclassified input as it is.
pub fn evaluate_accuracy<T: Scalar>(
    net: &Network<T>,
    split: &DatasetSplit<T>,
    cfg: &AttackConfig,
    batch_size: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    let bs = batch_size.max(1);
    let (mut clean, mut robust) = (0usize, 0usize);
    for (b, start) in (0..split.len()).step_by(bs).enumerate() {
        let (x, labels) = split.batch(start, (start + bs).min(split.len()))?;
        let ok_clean = count_correct(&net.forward(&x)?, labels);
        let x_adv = perturb(net, &x, labels, cfg, &mut batch_rng(seed, b as u64))?;
        let ok_adv = count_correct(&net.forward(&x_adv)?, labels);
        clean += ok_clean.iter().filter(|&&c| c).count();
        robust += ok_clean.iter().zip(&ok_adv).filter(|(c, a)| **c && **a).count();
    }
    let n = split.len().max(1) as f64;
    Ok((clean as f64 / n, robust as f64 / n))
}

pub fn robust_accuracy<T: Scalar>(
    net: &Network<T>,
    split: &DatasetSplit<T>,
    cfg: &AttackConfig,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    Ok(evaluate_accuracy(net, split, cfg, batch_size, seed)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub robust_accuracy: f64,
}

/// Robust accuracy at each budget in `epsilons` (strictly increasing).
pub fn epsilon_sweep<T: Scalar>(
    net: &Network<T>,
    split: &DatasetSplit<T>,
    cfg: &AttackConfig,
    epsilons: &[f64],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if epsilons.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Usage(format!("epsilon list must be strictly increasing: {epsilons:?}")));
    }
    epsilons
        .iter()
        .map(|&epsilon| {
            Ok(SweepPoint {
                epsilon,
                robust_accuracy: robust_accuracy(net, split, &cfg.with_epsilon(epsilon), batch_size, seed)?,
            })
        })
        .collect()
}
