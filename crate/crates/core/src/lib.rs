//! Robust training engine: a small reverse-mode autodiff core, a compact
//! residual classifier, PGD attacks, the seven training objectives
//! (standard, AT, AdvL, DataAug, AugMix, RobustAugMix, RTDA) and the
//! evaluation harness around them.

pub mod attack;
pub mod augment;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod divergence;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use model::{build_model, Classifier, Model, ModelConfig, Network, ParameterSet, SgdConfig};
pub use tensor::Tensor;
