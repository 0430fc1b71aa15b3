//! Dual item/scene sequence recommender: a small autodiff core, the dual
//! transformer encoder with cross-feeding fusion, contrastive and adversarial
//! regularizers, a synthetic log generator, training and ranking evaluation.

pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod gradsuite;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod synth;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
