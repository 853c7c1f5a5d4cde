//! Effective margin regularization for piecewise-linear classifiers.
//!
//! The crate bundles a small dense tensor engine with a recordable
//! reverse-mode tape ([`autodiff`]), the MLP and CNN used for the MNIST and
//! CIFAR-10 experiments ([`model`]), every training objective including the
//! exact and approximate effective-margin penalties ([`losses`]), effective
//! margin measurement ([`margin`]), l∞ attacks ([`attacks`]), the training
//! loop ([`trainer`]), dataset and checkpoint I/O ([`data`]) and the run
//! configuration and report formats used by the command-line tool
//! ([`report`]).

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod margin;
pub mod model;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use attacks::{AttackConfig, AttackKind, InnerLoss};
pub use autodiff::{GradientRequest, LeafKind, Tape, Var};
pub use data::{DatasetSplit, Provenance};
pub use error::{Error, Result};
pub use losses::{InputSource, LossConfig, PrimaryLoss, Regularizer};
pub use model::{Architecture, Bound, ForwardMode, Layer, ModelSpec, Network, Parameter};
pub use report::{Precision, RunConfig, RunSummary};
pub use tensor::{DType, Scalar, Tensor};
pub use trainer::{DatasetId, RunMetrics, Selection, TrainConfig};
