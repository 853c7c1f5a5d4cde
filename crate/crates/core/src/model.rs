//! Piecewise-linear networks: the layer stack, the two experiment
//! architectures, initialization and forward evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One entry of a layer stack. Only piecewise-linear layers exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Relu,
    Flatten,
}

impl Layer {
    fn has_params(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv { .. })
    }

    /// Per-sample output shape, or a description of why the input does not fit.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            Layer::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(format!("dense layer expects [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(format!("conv layer expects [{in_channels}, H, W], got {input:?}"));
                }
                let out = |n: usize| {
                    let padded = n + 2 * padding;
                    (stride > 0 && kernel <= padded && (padded - kernel).is_multiple_of(stride))
                        .then(|| (padded - kernel) / stride + 1)
                };
                match (out(input[1]), out(input[2])) {
                    (Some(h), Some(w)) => Ok(vec![out_channels, h, w]),
                    _ => Err(format!("conv kernel {kernel} stride {stride} padding {padding} does not fit {input:?}")),
                }
            }
            Layer::AvgPool { kernel, stride } => {
                if input.len() != 3 {
                    return Err(format!("pooling expects [C, H, W], got {input:?}"));
                }
                let out = |n: usize| {
                    (stride > 0 && kernel <= n && (n - kernel).is_multiple_of(stride)).then(|| (n - kernel) / stride + 1)
                };
                match (out(input[1]), out(input[2])) {
                    (Some(h), Some(w)) => Ok(vec![input[0], h, w]),
                    _ => Err(format!("pool kernel {kernel} stride {stride} does not tile {input:?}")),
                }
            }
            Layer::GlobalAvgPool => {
                if input.len() != 3 {
                    return Err(format!("global pooling expects [C, H, W], got {input:?}"));
                }
                Ok(vec![input[0]])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp4,
    Cnn4,
}

impl Architecture {
    pub fn id(self) -> &'static str {
        match self {
            Architecture::Mlp4 => "mlp4",
            Architecture::Cnn4 => "cnn4",
        }
    }

    pub fn default_width(self) -> usize {
        match self {
            Architecture::Mlp4 => 1024,
            Architecture::Cnn4 => 32,
        }
    }
}

/// Which architecture, on which input, with how many classes.
///
/// `width` is the hidden size of `mlp4` (1024 in the experiments) or the
/// first conv's channel count of `cnn4` (32; the later convs use 2× and 4×).
/// Smaller widths give the miniature networks used in gradient checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Per-sample `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub width: usize,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            architecture,
            input_shape,
            num_classes,
            width: architecture.default_width(),
        }
    }

    pub fn mlp4(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self::new(Architecture::Mlp4, input_shape, num_classes)
    }

    pub fn cnn4(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self::new(Architecture::Cnn4, input_shape, num_classes)
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Compact textual id stored in checkpoints, e.g.
    /// `mlp4;input=1x28x28;classes=10;width=1024`.
    pub fn encode(&self) -> String {
        let [c, h, w] = self.input_shape;
        format!(
            "{};input={c}x{h}x{w};classes={};width={}",
            self.architecture.id(),
            self.num_classes,
            self.width
        )
    }

    pub fn decode(id: &str) -> Result<Self> {
        let bad = || Error::UnknownSpec(id.to_string());
        let mut parts = id.split(';');
        let architecture = match parts.next() {
            Some("mlp4") => Architecture::Mlp4,
            Some("cnn4") => Architecture::Cnn4,
            _ => return Err(bad()),
        };
        let mut input_shape = None;
        let mut num_classes = None;
        let mut width = None;
        for part in parts {
            let (key, value) = part.split_once('=').ok_or_else(bad)?;
            match key {
                "input" => {
                    let dims: Vec<usize> = value
                        .split('x')
                        .map(|d| d.parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?;
                    input_shape = Some(<[usize; 3]>::try_from(dims).map_err(|_| bad())?);
                }
                "classes" => num_classes = Some(value.parse().map_err(|_| bad())?),
                "width" => width = Some(value.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        let spec = ModelSpec {
            architecture,
            input_shape: input_shape.ok_or_else(bad)?,
            num_classes: num_classes.ok_or_else(bad)?,
            width: width.ok_or_else(bad)?,
        };
        spec.layers().map_err(|_| bad())?;
        Ok(spec)
    }

    /// The layer stack, validated against the input shape.
    pub fn layers(&self) -> Result<Vec<Layer>> {
        if self.num_classes < 2 || self.width == 0 {
            return Err(Error::Config(format!("degenerate model spec {}", self.encode())));
        }
        let w = self.width;
        let k = self.num_classes;
        let layers = match self.architecture {
            Architecture::Mlp4 => {
                let mut layers = vec![Layer::Flatten];
                let mut inputs = self.input_dim();
                for _ in 0..4 {
                    layers.push(Layer::Dense { inputs, outputs: w });
                    layers.push(Layer::Relu);
                    inputs = w;
                }
                layers.push(Layer::Dense { inputs: w, outputs: k });
                layers
            }
            Architecture::Cnn4 => {
                let conv = |in_channels, out_channels, kernel| Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride: 1,
                    padding: 0,
                };
                vec![
                    conv(self.input_shape[0], w, 5),
                    Layer::Relu,
                    conv(w, 2 * w, 5),
                    Layer::Relu,
                    Layer::AvgPool { kernel: 2, stride: 2 },
                    conv(2 * w, 4 * w, 3),
                    Layer::Relu,
                    conv(4 * w, 4 * w, 3),
                    Layer::Relu,
                    Layer::GlobalAvgPool,
                    Layer::Dense {
                        inputs: 4 * w,
                        outputs: k,
                    },
                ]
            }
        };
        infer_shapes(&self.input_shape, &layers)?;
        Ok(layers)
    }
}

/// Symbolic shape pass; returns the per-sample shape after every layer.
pub fn infer_shapes(input: &[usize], layers: &[Layer]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::with_capacity(layers.len());
    let mut current = input.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        current = layer
            .output_shape(&current)
            .map_err(|e| Error::shape("network", format!("layer {i}: {e}")))?;
        shapes.push(current.clone());
    }
    Ok(shapes)
}

/// A named parameter tensor, `layer{i}.weight` or `layer{i}.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Forward-pass semantics. No layer here behaves differently between the
/// two; the flag is threaded through so penalty code states which one it
/// uses (gradient penalties always run in `Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForwardMode {
    #[default]
    Train,
    Eval,
}

/// Outputs of a recorded forward pass.
pub struct Forward<'t, T: Scalar> {
    pub logits: Var<'t, T>,
    /// Input to the final dense layer.
    pub features: Var<'t, T>,
}

/// A network whose parameters have been placed on a tape.
pub struct Bound<'t, 'n, T: Scalar> {
    pub net: &'n Network<T>,
    pub params: Vec<Var<'t, T>>,
    tape: &'t Tape<T>,
}

impl<'t, T: Scalar> Bound<'t, '_, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn forward(&self, x: Var<'t, T>, mode: ForwardMode) -> Result<Forward<'t, T>> {
        self.net.forward_on(x, &self.params, mode)
    }

    /// Forward pass on a differentiable copy of `x`; returns the input leaf
    /// and the logits.
    pub fn forward_input(&self, x: &Tensor<T>, mode: ForwardMode) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let xv = self.tape.input(x.clone());
        Ok((xv, self.forward(xv, mode)?.logits))
    }

    pub fn logits(&self, x: &Tensor<T>, mode: ForwardMode) -> Result<Var<'t, T>> {
        Ok(self.forward(self.tape.constant(x.clone()), mode)?.logits)
    }
}

/// Ordered layer stack with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: Option<ModelSpec>,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> Network<T> {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases,
    /// drawn layer by layer from a ChaCha8 stream seeded with `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let layers = spec.layers()?;
        let mut net = Self::from_layers(spec.input_shape.to_vec(), layers, seed)?;
        net.spec = Some(spec.clone());
        Ok(net)
    }

    /// A network over an arbitrary piecewise-linear layer stack.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>, seed: u64) -> Result<Self> {
        infer_shapes(&input_shape, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let (w_shape, fan_in, bias) = match *layer {
                Layer::Dense { inputs, outputs } => (vec![outputs, inputs], inputs, outputs),
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    out_channels,
                ),
                _ => continue,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let n = w_shape.iter().product();
            let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
            params.push(Parameter {
                name: format!("layer{i}.weight"),
                value: Tensor::new(w_shape, data)?,
            });
            params.push(Parameter {
                name: format!("layer{i}.bias"),
                value: Tensor::zeros([bias]),
            });
        }
        Ok(Network {
            spec: None,
            input_shape,
            layers,
            params,
        })
    }

    /// Rebuilds a network from explicit parameters (checkpoint loading).
    pub fn with_params(spec: &ModelSpec, params: Vec<Parameter<T>>) -> Result<Self> {
        let mut net = Self::init(spec, 0)?;
        net.replace_params(params)?;
        Ok(net)
    }

    /// Replaces parameters by name; names and shapes must match exactly.
    pub fn replace_params(&mut self, params: Vec<Parameter<T>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "replace_params",
                format!("expected {} tensors, got {}", self.params.len(), params.len()),
            ));
        }
        for (mine, theirs) in self.params.iter().zip(&params) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::shape(
                    "replace_params",
                    format!(
                        "{} {:?} does not match {} {:?}",
                        theirs.name,
                        theirs.value.shape(),
                        mine.name,
                        mine.value.shape()
                    ),
                ));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn spec(&self) -> Option<&ModelSpec> {
        self.spec.as_ref()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.iter().rev().find(|l| l.has_params()) {
            Some(Layer::Dense { outputs, .. }) => *outputs,
            Some(Layer::Conv { out_channels, .. }) => *out_channels,
            _ => 0,
        }
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Indices (into [`Network::params`]) of the final dense layer's weight
    /// and bias.
    pub fn final_layer_params(&self) -> Result<(usize, usize)> {
        let last = self.layers.len().checked_sub(1);
        match last.map(|i| (i, self.layers[i])) {
            Some((i, Layer::Dense { .. })) => {
                let w = self.params.iter().position(|p| p.name == format!("layer{i}.weight"));
                let b = self.params.iter().position(|p| p.name == format!("layer{i}.bias"));
                Ok((w.expect("dense weight"), b.expect("dense bias")))
            }
            _ => Err(Error::Usage("network does not end in a dense layer".into())),
        }
    }

    /// Multiplies the final dense layer's weight and bias by `alpha`, which
    /// scales every logit by `alpha`.
    pub fn scale_final_layer(&mut self, alpha: T) -> Result<()> {
        let (w, b) = self.final_layer_params()?;
        for idx in [w, b] {
            let p = &mut self.params[idx].value;
            *p = p.scale(alpha);
        }
        Ok(())
    }

    /// Squared l2 norm of every parameter, weights and biases alike.
    pub fn squared_norm(&self) -> T {
        self.params.iter().fold(T::zero(), |acc, p| acc + p.value.squared_norm())
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn trainable<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, '_, T> {
        Bound {
            net: self,
            params: self.params.iter().map(|p| tape.parameter(p.value.clone())).collect(),
            tape,
        }
    }

    /// Registers every parameter as a constant (attacks, evaluation).
    pub fn frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, '_, T> {
        Bound {
            net: self,
            params: self.params.iter().map(|p| tape.constant(p.value.clone())).collect(),
            tape,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::shape(
                "forward",
                format!("expected [B, {:?}], got {shape:?}", self.input_shape),
            ));
        }
        Ok(())
    }

    /// Records the forward pass of a batch `x[B×…]` on `x`'s tape using
    /// parameters already placed on that tape.
    pub fn forward_on<'t>(&self, x: Var<'t, T>, params: &[Var<'t, T>], _mode: ForwardMode) -> Result<Forward<'t, T>> {
        self.check_input(&x.shape())?;
        if params.len() != self.params.len() {
            return Err(Error::Usage(format!(
                "{} bound parameters for a network with {}",
                params.len(),
                self.params.len()
            )));
        }
        let mut h = x;
        let mut features = x;
        let mut next_param = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match *layer {
                Layer::Dense { .. } => {
                    if i + 1 == self.layers.len() {
                        features = h;
                    }
                    let (w, b) = (params[next_param], params[next_param + 1]);
                    next_param += 2;
                    h.matmul_t(w, false, true)?.add_bias(b)?
                }
                Layer::Conv { stride, padding, .. } => {
                    let (w, b) = (params[next_param], params[next_param + 1]);
                    next_param += 2;
                    h.conv2d(w, stride, padding)?.add_bias(b)?
                }
                Layer::AvgPool { kernel, stride } => h.avgpool(kernel, stride)?,
                Layer::GlobalAvgPool => h.global_avgpool()?,
                Layer::Relu => h.relu(),
                Layer::Flatten => h.flatten()?,
            };
        }
        Ok(Forward { logits: h, features })
    }

    /// Logits for a batch, without recording anything reusable.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let logits = self.frozen(&tape).logits(x, ForwardMode::Eval)?;
        Ok((*logits.value()).clone())
    }

    /// Pre-activation values feeding every ReLU, flattened per layer; used
    /// to check that two inputs share an activation pattern.
    pub fn preactivations(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_input(x.shape())?;
        let mut out = Vec::new();
        let mut h = x.clone();
        let mut next_param = 0;
        for layer in &self.layers {
            h = match *layer {
                Layer::Dense { .. } => {
                    let (w, b) = (&self.params[next_param].value, &self.params[next_param + 1].value);
                    next_param += 2;
                    h.matmul_t(w, false, true)?.add_bias(b)?
                }
                Layer::Conv { stride, padding, .. } => {
                    let (w, b) = (&self.params[next_param].value, &self.params[next_param + 1].value);
                    next_param += 2;
                    h.conv2d(w, Some(b), stride, padding)?
                }
                Layer::AvgPool { kernel, stride } => h.avgpool2d(kernel, stride)?,
                Layer::GlobalAvgPool => h.global_avgpool()?,
                Layer::Relu => {
                    out.push(h.clone());
                    h.relu()
                }
                Layer::Flatten => {
                    let b = h.shape()[0];
                    h.reshape(vec![b, h.len() / b])?
                }
            };
        }
        Ok(out)
    }

    /// Smallest |pre-activation| over every ReLU input of the batch.
    pub fn min_abs_preactivation(&self, x: &Tensor<T>) -> Result<f64> {
        Ok(self
            .preactivations(x)?
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.as_f64().abs()))
            .fold(f64::INFINITY, f64::min))
    }

    /// Whether every ReLU sees the same sign pattern on `a` and `b`.
    pub fn same_activation_pattern(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<bool> {
        let pa = self.preactivations(a)?;
        let pb = self.preactivations(b)?;
        Ok(pa.iter().zip(&pb).all(|(x, y)| {
            x.data()
                .iter()
                .zip(y.data())
                .all(|(u, v)| (*u > T::zero()) == (*v > T::zero()))
        }))
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Prediction with label-aware tie breaking: if the label ties for the
/// largest logit, some other tied class is returned, so a tie never counts
/// as correct.
pub fn strict_prediction<T: Scalar>(logits: &[T], label: usize) -> usize {
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = k;
        }
    }
    if best == label {
        if let Some(other) = logits
            .iter()
            .enumerate()
            .position(|(k, &v)| k != label && v >= logits[label])
        {
            return other;
        }
    }
    best
}
