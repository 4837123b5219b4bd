//! Recurrent neural ODE classifiers for irregularly timed event sequences.
//!
//! Between observations a learned vector field evolves the hidden state through
//! the elapsed time; at each observation a recurrent cell absorbs the new input.
//! Every post receives a class prediction. Discrete recurrent baselines, a
//! synthetic gap task, metrics and a small training loop are included.

// Arithmetic on `Var` is fallible, so it cannot implement `std::ops`; negated
// comparisons are deliberate because they also reject NaN.
#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cell;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ode;
pub mod par;
pub mod train;

pub use autodiff::{Gradients, ParamSet, Tape, Tensor, Var};
pub use cell::CellKind;
pub use data::{Dataset, GapTaskSpec, Post, SplitMode, SplitSpec, TimedSequence};
pub use error::{Error, Result};
pub use metrics::EvalReport;
pub use model::{Aggregation, Arch, Model, ModelConfig};
pub use nn::Activation;
pub use ode::{SolverConfig, SolverMethod, TimeChannel};
pub use par::Execution;
pub use train::{evaluate, predict, train, train_with, TrainConfig, TrainOutcome};
