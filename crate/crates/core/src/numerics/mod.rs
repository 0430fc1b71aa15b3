//! Dense `f64` tensors and a reverse-mode tape.
//!
//! Everything the encoder and losses compute goes through [`Tape`]; the
//! [`gradcheck`] module compares tape gradients against central differences.

pub mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS, PROB_EPS};
pub use tensor::{sigmoid, softmax, Tensor};

use rand::Rng;

/// Inverted dropout. With `rate == 0` this returns `x` unchanged and draws
/// nothing from `rng`.
pub fn dropout<R: Rng>(tape: &mut Tape, x: Var, rate: f64, rng: &mut R) -> crate::Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    if rate >= 1.0 {
        return Err(crate::Error::Parameter(format!(
            "dropout rate {rate} must be < 1"
        )));
    }
    let n = tape.value(x).len();
    let keep = 1.0 / (1.0 - rate);
    let factor = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    tape.mul_const(x, factor)
}
