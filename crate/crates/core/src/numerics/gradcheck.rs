//! Central-difference gradient checking.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default step for central differences.
pub const STEP: f64 = 1e-5;
/// Denominator floor in the relative error; keeps gradients that are zero up
/// to rounding from producing spurious ratios.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub step: f64,
    /// Negate the analytic gradient before comparing. Fault injection for
    /// testing the checker itself.
    pub flip_sign: bool,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            step: STEP,
            flip_sign: false,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::Contract(
            "gradient check needs a scalar function".into(),
        ));
    }
    Ok(t.item())
}

/// Worst elementwise relative error of `d f / d inputs`.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, opts: Options) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        scalar_of(&t, o)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = work[i].values()[j];
            work[i].values_mut()[j] = orig + opts.step;
            let fp = eval(&work)?;
            work[i].values_mut()[j] = orig - opts.step;
            let fm = eval(&work)?;
            work[i].values_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = if opts.flip_sign {
                -analytic[j]
            } else {
                analytic[j]
            };
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Worst elementwise relative error of `d f / d params` for the listed ids.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], f: F, opts: Options) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut work = store.clone();
    let mut worst = 0.0f64;
    for &id in ids {
        let analytic = grads.param_or_zero(store, id);
        for j in 0..analytic.len() {
            let orig = work.tensor(id).values()[j];
            work.values_mut(id)[j] = orig + opts.step;
            let mut t = Tape::new();
            let o = f(&mut t, &work)?;
            let fp = scalar_of(&t, o)?;
            work.values_mut(id)[j] = orig - opts.step;
            let mut t = Tape::new();
            let o = f(&mut t, &work)?;
            let fm = scalar_of(&t, o)?;
            work.values_mut(id)[j] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = if opts.flip_sign {
                -analytic[j]
            } else {
                analytic[j]
            };
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_flip_is_caught() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let f = |t: &mut Tape, v: &[Var]| {
            let s = t.sigmoid(v[0]);
            Ok(t.sum(s))
        };
        assert!(check_inputs(&[x.clone()], f, Options::default()).unwrap() < 1e-6);
        let bad = Options {
            flip_sign: true,
            ..Options::default()
        };
        assert!(check_inputs(&[x], f, bad).unwrap() > 1.0);
    }
}
