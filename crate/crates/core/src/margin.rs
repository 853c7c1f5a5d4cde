//! Effective weights and effective margins of piecewise-linear networks.
//!
//! Around any input whose pre-activations are all nonzero, a ReLU network
//! computes `l = W(x)·x + b(x)`. Row `j` of `W(x)` is `∇_x l_j`, and the
//! effective margin of a sample with label `y` is
//! `min_{j≠y} (l_y − l_j) / ‖w_y − w_j‖`.

use crate::autodiff::Tape;
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::model::{strict_prediction, ForwardMode, Network};
use crate::tensor::{Scalar, Tensor};

/// Norms below this count as zero and produce an infinite margin.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Local linear coefficients for a batch.
#[derive(Debug, Clone)]
pub struct EffectiveWeights<T> {
    /// `B×K×D`, row `(i, j)` is `∇_{x_i} l_ij` with the input flattened.
    pub weights: Tensor<T>,
    /// `B×K`, `l_ij − ⟨w_ij, x_i⟩`.
    pub biases: Tensor<T>,
    /// `B×K`.
    pub logits: Tensor<T>,
}

/// Effective weights by one backward pass per class.
pub fn effective_weights<T: Scalar>(net: &Network<T>, x: &Tensor<T>) -> Result<EffectiveWeights<T>> {
    let tape = Tape::new();
    let bound = net.frozen(&tape);
    let (xv, logits) = bound.forward_input(x, ForwardMode::Eval)?;
    let lv = logits.value();
    let (b, k) = (lv.shape()[0], lv.shape()[1]);
    let d = x.len() / b.max(1);
    let mut weights = vec![T::zero(); b * k * d];
    for j in 0..k {
        let mut col = Tensor::zeros([b, k]);
        for i in 0..b {
            col.data_mut()[i * k + j] = T::one();
        }
        let pick = logits.mul(tape.constant(col))?.sum_all();
        let g = pick.grad_wrt(&[xv], false)?[0].value();
        for i in 0..b {
            weights[(i * k + j) * d..(i * k + j + 1) * d].copy_from_slice(&g.data()[i * d..(i + 1) * d]);
        }
    }
    let mut biases = Vec::with_capacity(b * k);
    for i in 0..b {
        let xi = &x.data()[i * d..(i + 1) * d];
        for j in 0..k {
            let w = &weights[(i * k + j) * d..(i * k + j + 1) * d];
            let dot = w.iter().zip(xi).fold(T::zero(), |acc, (&a, &c)| acc + a * c);
            biases.push(lv.data()[i * k + j] - dot);
        }
    }
    Ok(EffectiveWeights {
        weights: Tensor::new(vec![b, k, d], weights)?,
        biases: Tensor::new(vec![b, k], biases)?,
        logits: (*lv).clone(),
    })
}

/// The margin of one sample and the class attaining it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginValue {
    pub margin: f64,
    pub runner_up: usize,
    /// The minimizing class had (numerically) the same effective weights as
    /// the label; `margin` is then `±∞` by the sign of the logit gap.
    pub degenerate: bool,
}

/// Margin from one sample's logits `[K]` and effective weights `[K×D]`.
/// With `biases`, the bias is appended to each weight row before taking
/// norms.
pub fn margin_from_weights<T: Scalar>(logits: &[T], weights: &[T], biases: Option<&[T]>, label: usize) -> Result<MarginValue> {
    let k = logits.len();
    if k < 2 || label >= k || !weights.len().is_multiple_of(k) {
        return Err(Error::Usage(format!("margin needs K >= 2 classes and a valid label (K={k}, label={label})")));
    }
    let d = weights.len() / k;
    let wy = &weights[label * d..(label + 1) * d];
    let mut best: Option<MarginValue> = None;
    for j in (0..k).filter(|&j| j != label) {
        let wj = &weights[j * d..(j + 1) * d];
        let mut sq: f64 = wy.iter().zip(wj).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
        if let Some(bs) = biases {
            sq += (bs[label].as_f64() - bs[j].as_f64()).powi(2);
        }
        let norm = sq.sqrt();
        let gap = logits[label].as_f64() - logits[j].as_f64();
        let (margin, degenerate) = if norm < DEGENERATE_NORM {
            (if gap > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY }, true)
        } else if gap == 0.0 {
            // a tie counts as misclassified
            (-0.0, false)
        } else {
            (gap / norm, false)
        };
        if best.is_none_or(|b| margin < b.margin) {
            best = Some(MarginValue {
                margin,
                runner_up: j,
                degenerate,
            });
        }
    }
    Ok(best.expect("at least one other class"))
}

/// Effective margin of a single sample `x[1×…]` with label `y`.
pub fn effective_margin<T: Scalar>(net: &Network<T>, x: &Tensor<T>, label: usize) -> Result<f64> {
    if x.shape().first() != Some(&1) {
        return Err(Error::shape("effective_margin", format!("expected one sample, got {:?}", x.shape())));
    }
    let ew = effective_weights(net, x)?;
    Ok(margin_from_weights(ew.logits.data(), ew.weights.data(), None, label)?.margin)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMargin {
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
    pub margin: f64,
    pub runner_up: usize,
    pub degenerate: bool,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginSummary {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginReport {
    pub split: String,
    pub per_sample: Vec<SampleMargin>,
    /// Over correctly classified samples with a finite margin; absent when
    /// there are none.
    pub summary: Option<MarginSummary>,
    pub count_used: usize,
    pub count_total: usize,
    /// Samples whose margin is infinite (identical effective weights).
    pub degenerate: usize,
    pub bias_augmented: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarginOptions {
    /// Only the first `sample_cap` samples of the split.
    pub sample_cap: Option<usize>,
    pub batch_size: usize,
    pub bias_augmented: bool,
}

impl Default for MarginOptions {
    fn default() -> Self {
        MarginOptions {
            sample_cap: None,
            batch_size: 100,
            bias_augmented: false,
        }
    }
}

pub fn summarize(values: &[f64]) -> Option<MarginSummary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some(MarginSummary { mean, std: var.sqrt() })
}

/// Per-sample margins and their statistics over correctly classified
/// samples.
pub fn margin_report<T: Scalar>(net: &Network<T>, split: &DatasetSplit<T>, name: &str, opts: &MarginOptions) -> Result<MarginReport> {
    let n = opts.sample_cap.map_or(split.len(), |c| c.min(split.len()));
    let bs = opts.batch_size.max(1);
    let mut per_sample = Vec::with_capacity(n);
    for start in (0..n).step_by(bs) {
        let end = (start + bs).min(n);
        let (x, labels) = split.batch(start, end)?;
        let ew = effective_weights(net, &x)?;
        let k = ew.logits.shape()[1];
        let d = ew.weights.shape()[2];
        for (r, &label) in labels.iter().enumerate() {
            let logits = &ew.logits.data()[r * k..(r + 1) * k];
            let weights = &ew.weights.data()[r * k * d..(r + 1) * k * d];
            let biases = opts.bias_augmented.then(|| &ew.biases.data()[r * k..(r + 1) * k]);
            let m = margin_from_weights(logits, weights, biases, label)?;
            per_sample.push(SampleMargin {
                index: start + r,
                label,
                prediction: strict_prediction(logits, label),
                margin: m.margin,
                runner_up: m.runner_up,
                degenerate: m.degenerate,
            });
        }
    }
    let correct: Vec<f64> = per_sample
        .iter()
        .filter(|s| s.prediction == s.label && s.margin.is_finite())
        .map(|s| s.margin)
        .collect();
    Ok(MarginReport {
        split: name.to_string(),
        count_used: correct.len(),
        count_total: per_sample.len(),
        summary: summarize(&correct),
        degenerate: per_sample.iter().filter(|s| s.degenerate).count(),
        per_sample,
        bias_augmented: opts.bias_augmented,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layer, ModelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn linear_model_weights_are_constant() {
        let net = Network::<f64>::from_layers(vec![5], vec![Layer::Dense { inputs: 5, outputs: 3 }], 2).unwrap();
        let x = random(&[4, 5], 3, -1.0, 1.0);
        let ew = effective_weights(&net, &x).unwrap();
        let w = &net.params()[0].value;
        for i in 0..4 {
            assert_eq!(&ew.weights.data()[i * 15..(i + 1) * 15], w.data());
        }
        assert!(ew.biases.max_abs_diff(&Tensor::zeros([4, 3])) < 1e-14);
    }

    #[test]
    fn positive_relu_regime_gives_matrix_product() {
        let layers = vec![Layer::Dense { inputs: 2, outputs: 2 }, Layer::Relu, Layer::Dense { inputs: 2, outputs: 2 }];
        let mut net = Network::<f64>::from_layers(vec![2], layers, 0).unwrap();
        net.params_mut()[0].value = Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 1.0]).unwrap();
        net.params_mut()[1].value = Tensor::from_f64([2], &[0.5, 0.5]).unwrap();
        net.params_mut()[2].value = Tensor::from_f64([2, 2], &[1.0, -1.0, 2.0, 0.5]).unwrap();
        let x = Tensor::from_f64([1, 2], &[0.3, 0.4]).unwrap();
        let ew = effective_weights(&net, &x).unwrap();
        // [[1,-1],[2,0.5]] · [[1,2],[3,1]]
        assert_eq!(ew.weights.data(), &[-2.0, 1.0, 3.5, 4.5]);
    }

    #[test]
    fn weights_match_finite_differences() {
        let net = Network::<f64>::init(&ModelSpec::cnn4([1, 18, 18], 4).with_width(2), 5).unwrap();
        let x = random(&[2, 1, 18, 18], 6, 0.0, 1.0);
        assert!(net.min_abs_preactivation(&x).unwrap() > 1e-5);
        let ew = effective_weights(&net, &x).unwrap();
        let h = 1e-7;
        for i in 0..2 {
            for di in (0..324).step_by(17) {
                let mut plus = x.clone();
                let mut minus = x.clone();
                plus.data_mut()[i * 324 + di] += h;
                minus.data_mut()[i * 324 + di] -= h;
                let (lp, lm) = (net.forward(&plus).unwrap(), net.forward(&minus).unwrap());
                for j in 0..4 {
                    let numeric = (lp.data()[i * 4 + j] - lm.data()[i * 4 + j]) / (2.0 * h);
                    let analytic = ew.weights.data()[(i * 4 + j) * 324 + di];
                    assert!((numeric - analytic).abs() < 1e-6, "{numeric} vs {analytic}");
                }
            }
        }
    }

    #[test]
    fn binary_linear_margin_is_hyperplane_distance() {
        let mut net = Network::<f64>::from_layers(vec![3], vec![Layer::Dense { inputs: 3, outputs: 2 }], 0).unwrap();
        let w = [0.5, -1.0, 2.0];
        net.params_mut()[0].value = Tensor::from_f64([2, 3], &[w[0], w[1], w[2], -w[0], -w[1], -w[2]]).unwrap();
        let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (xv, y) in [([0.3, 0.1, 0.9], 0), ([0.3, 0.1, 0.9], 1), ([0.9, 0.8, 0.1], 1)] {
            let x = Tensor::from_f64([1, 3], &xv).unwrap();
            let wx: f64 = w.iter().zip(&xv).map(|(a, b)| a * b).sum();
            let expected = if y == 0 { wx / wn } else { -wx / wn };
            assert!((effective_margin(&net, &x, y).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_rows_give_signed_infinity() {
        let w = [1.0, 2.0, 1.0, 2.0];
        let m = margin_from_weights(&[1.0, 0.0], &w, None, 0).unwrap();
        assert_eq!(m.margin, f64::INFINITY);
        assert!(m.degenerate);
        let m = margin_from_weights(&[0.0, 1.0], &w, None, 0).unwrap();
        assert_eq!(m.margin, f64::NEG_INFINITY);
        let tie = margin_from_weights(&[1.0, 1.0], &[1.0, 0.0, 0.0, 1.0], None, 0).unwrap();
        assert!(!(tie.margin > 0.0));
    }

    #[test]
    fn margin_is_brute_force_minimum() {
        let net = Network::<f64>::init(&ModelSpec::mlp4([1, 3, 3], 6).with_width(10), 8).unwrap();
        let x = random(&[5, 1, 3, 3], 9, 0.0, 1.0);
        let ew = effective_weights(&net, &x).unwrap();
        for i in 0..5 {
            let y = i % 6;
            let logits = &ew.logits.data()[i * 6..(i + 1) * 6];
            let mut best = f64::INFINITY;
            for j in (0..6).filter(|&j| j != y) {
                let mut sq = 0.0;
                for d in 0..9 {
                    let diff = ew.weights.data()[(i * 6 + y) * 9 + d] - ew.weights.data()[(i * 6 + j) * 9 + d];
                    sq += diff * diff;
                }
                best = best.min((logits[y] - logits[j]) / sq.sqrt());
            }
            let got = effective_margin(&net, &x.slice_rows(i, i + 1).unwrap(), y).unwrap();
            assert!((got - best).abs() < 1e-12);
        }
    }

    #[test]
    fn report_filters_to_correct_samples() {
        let net = Network::<f64>::init(&ModelSpec::mlp4([1, 3, 3], 4).with_width(10), 10).unwrap();
        let x = random(&[30, 1, 3, 3], 11, 0.0, 1.0);
        let preds = net.forward(&x).unwrap().argmax_axis(1).unwrap();
        let labels = preds.iter().enumerate().map(|(i, &p)| if i % 3 == 0 { (p + 1) % 4 } else { p }).collect();
        let split = DatasetSplit::new(x, labels, 4).unwrap();
        let opts = MarginOptions {
            batch_size: 7,
            ..MarginOptions::default()
        };
        let report = margin_report(&net, &split, "test", &opts).unwrap();
        assert_eq!(report.count_total, 30);
        assert_eq!(report.count_used, 20);
        for s in &report.per_sample {
            assert_eq!(s.margin > 0.0, s.prediction == s.label);
        }
        let used: Vec<f64> = report.per_sample.iter().filter(|s| s.prediction == s.label).map(|s| s.margin).collect();
        let mean = used.iter().sum::<f64>() / used.len() as f64;
        assert!((report.summary.unwrap().mean - mean).abs() < 1e-12);

        let all_wrong: Vec<usize> = preds.iter().map(|&p| (p + 1) % 4).collect();
        let split = DatasetSplit::new(split.images.clone(), all_wrong, 4).unwrap();
        let report = margin_report(&net, &split, "test", &opts).unwrap();
        assert_eq!(report.count_used, 0);
        assert!(report.summary.is_none());
    }

    #[test]
    fn augmented_norm_is_never_smaller() {
        let mut net = Network::<f64>::init(&ModelSpec::mlp4([1, 3, 3], 4).with_width(10), 12).unwrap();
        for p in net.params_mut().iter_mut().filter(|p| p.name.ends_with("bias")) {
            p.value = p.value.add_scalar(0.3);
        }
        let x = random(&[10, 1, 3, 3], 13, 0.0, 1.0);
        let labels = net.forward(&x).unwrap().argmax_axis(1).unwrap();
        let split = DatasetSplit::new(x, labels, 4).unwrap();
        let plain = margin_report(&net, &split, "train", &MarginOptions::default()).unwrap();
        let aug = margin_report(
            &net,
            &split,
            "train",
            &MarginOptions {
                bias_augmented: true,
                ..MarginOptions::default()
            },
        )
        .unwrap();
        for (a, b) in plain.per_sample.iter().zip(&aug.per_sample) {
            assert!(b.margin.abs() <= a.margin.abs() + 1e-12);
        }
    }
}
