//! Training objectives and gradient penalties.
//!
//! Every loss is built on a [`Tape`] so that it can be differentiated with
//! respect to the parameters; the gradient penalties record their inner
//! input-gradient pass so the outer pass goes through it.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::{Bound, ForwardMode};
use crate::tensor::{Scalar, Tensor};

/// Main data term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrimaryLoss {
    Xe,
    /// Large-margin softmax with integer angular margin `m`.
    Lsoftmax { m: u32 },
    /// Clean cross-entropy plus `beta` times the adversarial KL term.
    Trades { beta: f64 },
}

/// Optional gradient penalty.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regularizer {
    #[default]
    None,
    EmrExact { lambda: f64 },
    EmrApprox { lambda: f64, temperature: f64 },
    Igr { lambda: f64 },
}

impl Regularizer {
    pub fn lambda(&self) -> f64 {
        match *self {
            Regularizer::None => 0.0,
            Regularizer::EmrExact { lambda } | Regularizer::EmrApprox { lambda, .. } | Regularizer::Igr { lambda } => {
                lambda
            }
        }
    }

    fn with_lambda(self, value: f64) -> Self {
        match self {
            Regularizer::None => Regularizer::None,
            Regularizer::EmrExact { .. } => Regularizer::EmrExact { lambda: value },
            Regularizer::EmrApprox { temperature, .. } => Regularizer::EmrApprox {
                lambda: value,
                temperature,
            },
            Regularizer::Igr { .. } => Regularizer::Igr { lambda: value },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    #[default]
    Clean,
    Adversarial,
}

/// Full objective: `primary + weight_decay·‖θ‖² + λ·penalty`.
///
/// `primary_input = adversarial` with an `xe` primary is adversarial
/// training; `emr_input` selects the batch the penalty sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub primary: PrimaryLoss,
    #[serde(default)]
    pub primary_input: InputSource,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub regularizer: Regularizer,
    #[serde(default)]
    pub emr_input: InputSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            primary: PrimaryLoss::Xe,
            primary_input: InputSource::Clean,
            weight_decay: 0.0,
            regularizer: Regularizer::None,
            emr_input: InputSource::Clean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")))
            }
        };
        match self.primary {
            PrimaryLoss::Xe => {}
            PrimaryLoss::Lsoftmax { m } => {
                if m < 1 {
                    return bad("lsoftmax margin m must be >= 1".into());
                }
            }
            PrimaryLoss::Trades { beta } => {
                nonneg("trades beta", beta)?;
                if self.primary_input == InputSource::Adversarial {
                    return bad("trades already uses both clean and adversarial inputs; primary_input must be clean".into());
                }
            }
        }
        nonneg("weight_decay", self.weight_decay)?;
        nonneg("regularizer lambda", self.regularizer.lambda())?;
        if let Regularizer::EmrApprox { temperature, .. } = self.regularizer {
            if !(temperature.is_finite() && temperature > 0.0) {
                return bad(format!("approx-emr temperature must be > 0, got {temperature}"));
            }
        }
        Ok(())
    }

    /// Whether [`total_loss`] needs an adversarial batch.
    pub fn requires_adversarial(&self) -> bool {
        matches!(self.primary, PrimaryLoss::Trades { .. })
            || self.primary_input == InputSource::Adversarial
            || (self.regularizer != Regularizer::None && self.emr_input == InputSource::Adversarial)
    }

    /// Copy with the penalty coefficient multiplied by `factor` (the
    /// coefficient follows the learning-rate decay).
    pub fn with_penalty_factor(&self, factor: f64) -> Self {
        LossConfig {
            regularizer: self.regularizer.with_lambda(self.regularizer.lambda() * factor),
            ..*self
        }
    }
}

fn one_hot<T: Scalar>(labels: &[usize], k: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros([labels.len(), k]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Usage(format!("label {y} at position {i} is out of range for {k} classes")));
        }
        t.data_mut()[i * k + y] = T::one();
    }
    Ok(t)
}

fn logits_dims<T: Scalar>(logits: &Var<'_, T>, labels: &[usize]) -> Result<(usize, usize)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(Error::shape(
            "loss",
            format!("logits {shape:?} with {} labels", labels.len()),
        ));
    }
    Ok((shape[0], shape[1]))
}

/// `Σ_i −log softmax(l_i)[y_i]`.
fn cross_entropy_sum<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let (_, k) = logits_dims(&logits, labels)?;
    let mask = logits.tape().constant(one_hot(labels, k)?);
    Ok(logits.log_softmax()?.mul(mask)?.sum_all().scale(-T::one()))
}

/// Mean cross-entropy of `logits[B×K]` against integer labels.
pub fn cross_entropy<'t, T: Scalar>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let b = labels.len();
    Ok(cross_entropy_sum(logits, labels)?.scale(T::of(1.0 / b.max(1) as f64)))
}

/// `Σ θ²` over every parameter, biases included.
pub fn weight_decay_penalty<'t, T: Scalar>(params: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let mut terms = params.iter().map(|p| Ok(p.square()?.sum_all()));
    let first = terms
        .next()
        .ok_or_else(|| Error::Usage("weight decay of an empty parameter list".into()))??;
    terms.try_fold(first, |acc, t: Result<Var<'t, T>>| acc.add(t?))
}

/// `ψ(θ) = (−1)^k cos(mθ) − 2k` for `θ ∈ [kπ/m, (k+1)π/m]`.
pub fn lsoftmax_psi(theta: f64, m: u32) -> f64 {
    let k = lsoftmax_segment(theta.cos(), m);
    let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    sign * (m as f64 * theta).cos() - 2.0 * k as f64
}

fn lsoftmax_segment(cos: f64, m: u32) -> u32 {
    let theta = cos.clamp(-1.0, 1.0).acos();
    ((m as f64 * theta / std::f64::consts::PI).floor() as u32).min(m - 1)
}

/// Logits with the target entry replaced by `‖w_y‖‖x‖ψ(θ_y) + b_y`, where
/// `θ_y` is the angle between the feature `x` and the target row `w_y` of
/// the final layer. Other entries are the plain `⟨w_j, x⟩ + b_j`.
pub fn lsoftmax_logits<'t, T: Scalar>(
    features: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Var<'t, T>,
    labels: &[usize],
    m: u32,
) -> Result<Var<'t, T>> {
    if m < 1 {
        return Err(Error::Config("lsoftmax margin m must be >= 1".into()));
    }
    let plain = features.matmul_t(weight, false, true)?.add_bias(bias)?;
    let (b, k) = logits_dims(&plain, labels)?;
    if m == 1 {
        return Ok(plain);
    }
    let tape = features.tape();
    let mask = tape.constant(one_hot(labels, k)?);
    let w_y = mask.matmul(weight)?;
    let dot = features.mul(w_y)?.sum_last()?;
    let norms_sq = features.square()?.sum_last()?.mul(w_y.square()?.sum_last()?)?;
    // The tiny offset keeps the cosine finite for all-zero features.
    let norm = norms_sq.add(tape.constant(Tensor::full([b, 1], T::of(1e-24))))?.sqrt();
    let cos = dot.mul(norm.recip())?;

    // cos(mθ) = T_m(cos θ) by the Chebyshev recurrence.
    let mut t_prev = tape.constant(Tensor::ones([b, 1]));
    let mut t_cur = cos;
    for _ in 1..m {
        let next = cos.scale(T::of(2.0)).mul(t_cur)?.sub(t_prev)?;
        t_prev = t_cur;
        t_cur = next;
    }
    let cos_values = cos.value();
    let mut sign = Vec::with_capacity(b);
    let mut offset = Vec::with_capacity(b);
    for c in cos_values.data() {
        let seg = lsoftmax_segment(c.as_f64(), m);
        sign.push(if seg.is_multiple_of(2) { T::one() } else { -T::one() });
        offset.push(T::of(-2.0 * seg as f64));
    }
    let sign = tape.constant(Tensor::new([b, 1], sign)?);
    let offset = tape.constant(Tensor::new([b, 1], offset)?);
    let psi = t_cur.mul(sign)?.add(offset)?;

    let b_y = mask.mul(bias.broadcast_axis1(&[b, k])?)?.sum_last()?;
    let target = norm.mul(psi)?.add(b_y)?;
    let plain_y = plain.mul(mask)?.sum_last()?;
    let delta = target.sub(plain_y)?.broadcast_last(k)?.mul(mask)?;
    plain.add(delta)
}

/// Mean cross-entropy of [`lsoftmax_logits`].
pub fn lsoftmax_loss<'t, T: Scalar>(
    features: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Var<'t, T>,
    labels: &[usize],
    m: u32,
) -> Result<Var<'t, T>> {
    cross_entropy(lsoftmax_logits(features, weight, bias, labels, m)?, labels)
}

fn squared_norm_mean<'t, T: Scalar>(g: Var<'t, T>, batch: usize) -> Result<Var<'t, T>> {
    Ok(g.square()?.sum_all().scale(T::of(1.0 / batch as f64)))
}

/// `mean_i ‖∇_{x_i} XE(f(x_i), y_i)‖²`.
pub fn igr_penalty<'t, T: Scalar>(net: &Bound<'t, '_, T>, x: &Tensor<T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let (xv, logits) = net.forward_input(x, ForwardMode::Eval)?;
    let xe = cross_entropy_sum(logits, labels)?;
    let g = xe.grad_wrt(&[xv], true)?[0];
    squared_norm_mean(g, labels.len())
}

/// `(1/B) Σ_i Σ_j ‖∇_{x_i} l_ij‖²`, one recorded backward pass per class.
/// Pass `j` differentiates `Σ_i l_ij`; since samples do not interact, row
/// `i` of that gradient is `∇_{x_i} l_ij`.
pub fn emr_exact_penalty<'t, T: Scalar>(net: &Bound<'t, '_, T>, x: &Tensor<T>) -> Result<Var<'t, T>> {
    let (xv, logits) = net.forward_input(x, ForwardMode::Eval)?;
    let shape = logits.shape();
    let (b, k) = (shape[0], shape[1]);
    let mut total: Option<Var<'t, T>> = None;
    for j in 0..k {
        let mut col = Tensor::zeros([b, k]);
        for i in 0..b {
            col.data_mut()[i * k + j] = T::one();
        }
        let pick = logits.mul(net.tape().constant(col))?.sum_all();
        let g = pick.grad_wrt(&[xv], true)?[0];
        let term = g.square()?.sum_all();
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Usage("network has no outputs".into()))?;
    Ok(total.scale(T::of(1.0 / b as f64)))
}

/// `mean_i ‖∇_{x_i} Σ_j p_ij l_ij‖²` with `p = softmax(l / t)` treated as a
/// constant. A single backward pass regardless of the class count.
pub fn emr_approx_penalty<'t, T: Scalar>(net: &Bound<'t, '_, T>, x: &Tensor<T>, temperature: f64) -> Result<Var<'t, T>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Config(format!("approx-emr temperature must be > 0, got {temperature}")));
    }
    let (xv, logits) = net.forward_input(x, ForwardMode::Eval)?;
    let p = logits.value().scale(T::of(1.0 / temperature)).softmax(1)?;
    weighted_input_gradient_norm(net, xv, logits, p)
}

/// The approximate penalty with caller-supplied class weights `p[B×K]`.
pub fn emr_weighted_penalty<'t, T: Scalar>(net: &Bound<'t, '_, T>, x: &Tensor<T>, p: &Tensor<T>) -> Result<Var<'t, T>> {
    let (xv, logits) = net.forward_input(x, ForwardMode::Eval)?;
    if p.shape() != logits.shape() {
        return Err(Error::shape("emr_weighted_penalty", format!("weights {:?} for logits {:?}", p.shape(), logits.shape())));
    }
    weighted_input_gradient_norm(net, xv, logits, p.clone())
}

fn weighted_input_gradient_norm<'t, T: Scalar>(
    net: &Bound<'t, '_, T>,
    xv: Var<'t, T>,
    logits: Var<'t, T>,
    p: Tensor<T>,
) -> Result<Var<'t, T>> {
    let b = p.shape()[0];
    let h = logits.mul(net.tape().constant(p))?.sum_all();
    let g = h.grad_wrt(&[xv], true)?[0];
    squared_norm_mean(g, b)
}

/// `mean_i KL(softmax(p_i) ‖ softmax(q_i))` for logits `p` and `q`.
pub fn kl_divergence<'t, T: Scalar>(logits_p: Var<'t, T>, logits_q: Var<'t, T>) -> Result<Var<'t, T>> {
    if logits_p.shape() != logits_q.shape() || logits_p.shape().len() != 2 {
        return Err(Error::shape("kl_divergence", format!("{:?} vs {:?}", logits_p.shape(), logits_q.shape())));
    }
    let b = logits_p.shape()[0];
    let lp = logits_p.log_softmax()?;
    let lq = logits_q.log_softmax()?;
    Ok(lp.exp().mul(lp.sub(lq)?)?.sum_all().scale(T::of(1.0 / b as f64)))
}

/// `XE(f(x_clean), y) + β · KL(softmax(f(x_adv)) ‖ softmax(f(x_clean)))`.
pub fn trades_loss<'t, T: Scalar>(
    net: &Bound<'t, '_, T>,
    x_clean: &Tensor<T>,
    x_adv: &Tensor<T>,
    labels: &[usize],
    beta: f64,
) -> Result<Var<'t, T>> {
    let clean = net.logits(x_clean, ForwardMode::Train)?;
    let adv = net.logits(x_adv, ForwardMode::Train)?;
    trades_from_logits(clean, adv, labels, beta)
}

fn trades_from_logits<'t, T: Scalar>(clean: Var<'t, T>, adv: Var<'t, T>, labels: &[usize], beta: f64) -> Result<Var<'t, T>> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::Config(format!("trades beta must be >= 0, got {beta}")));
    }
    let xe = cross_entropy(clean, labels)?;
    xe.add(kl_divergence(adv, clean)?.scale(T::of(beta)))
}

/// The objective and the values of its parts.
pub struct LossTerms<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub primary: f64,
    /// `‖θ‖²`, before multiplying by the coefficient.
    pub weight_decay: f64,
    /// Raw penalty value, before multiplying by λ; zero with no regularizer.
    pub penalty: f64,
}

/// Builds the configured objective on `net`'s tape.
pub fn total_loss<'t, T: Scalar>(
    cfg: &LossConfig,
    net: &Bound<'t, '_, T>,
    x: &Tensor<T>,
    labels: &[usize],
    x_adv: Option<&Tensor<T>>,
) -> Result<LossTerms<'t, T>> {
    cfg.validate()?;
    if cfg.requires_adversarial() && x_adv.is_none() {
        return Err(Error::Usage("this loss configuration needs an adversarial batch".into()));
    }
    let pick = |src: InputSource| match src {
        InputSource::Clean => x,
        InputSource::Adversarial => x_adv.expect("checked above"),
    };
    let primary = match cfg.primary {
        PrimaryLoss::Xe => cross_entropy(net.logits(pick(cfg.primary_input), ForwardMode::Train)?, labels)?,
        PrimaryLoss::Lsoftmax { m } => {
            let input = net.tape().constant(pick(cfg.primary_input).clone());
            let out = net.forward(input, ForwardMode::Train)?;
            let (wi, bi) = net.net.final_layer_params()?;
            lsoftmax_loss(out.features, net.params[wi], net.params[bi], labels, m)?
        }
        PrimaryLoss::Trades { beta } => trades_loss(net, x, x_adv.expect("checked above"), labels, beta)?,
    };
    let primary_value = primary.value().item().as_f64();
    let mut total = primary;

    let wd = weight_decay_penalty(&net.params)?;
    let wd_value = wd.value().item().as_f64();
    if cfg.weight_decay > 0.0 {
        total = total.add(wd.scale(T::of(cfg.weight_decay)))?;
    }

    let penalty_x = pick(cfg.emr_input);
    let penalty = match cfg.regularizer {
        Regularizer::None => None,
        Regularizer::EmrExact { .. } => Some(emr_exact_penalty(net, penalty_x)?),
        Regularizer::EmrApprox { temperature, .. } => Some(emr_approx_penalty(net, penalty_x, temperature)?),
        Regularizer::Igr { .. } => Some(igr_penalty(net, penalty_x, labels)?),
    };
    let mut penalty_value = 0.0;
    if let Some(p) = penalty {
        penalty_value = p.value().item().as_f64();
        total = total.add(p.scale(T::of(cfg.regularizer.lambda())))?;
    }
    Ok(LossTerms {
        total,
        primary: primary_value,
        weight_decay: wd_value,
        penalty: penalty_value,
    })
}
