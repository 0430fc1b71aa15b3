use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Target distributions for adversarial prior matching. Every coordinate is
/// drawn independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    /// N(0, 1).
    StandardGaussian,
    /// U[0, 1).
    Uniform,
    /// Laplace(0, 1).
    Laplace,
    /// exp(N(0, 1)).
    Lognormal,
    /// Equal mixture of N(0, 1) and N(3, 1).
    MultiGaussian,
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "standard-gaussian" => PriorKind::StandardGaussian,
            "uniform" => PriorKind::Uniform,
            "laplace" => PriorKind::Laplace,
            "lognormal" => PriorKind::Lognormal,
            "multi-gaussian" => PriorKind::MultiGaussian,
            other => return Err(Error::Config(format!("unknown prior {other:?}"))),
        })
    }
}

fn draw<R: Rng>(kind: PriorKind, rng: &mut R) -> f64 {
    match kind {
        PriorKind::StandardGaussian => rng.sample(StandardNormal),
        PriorKind::Uniform => rng.random::<f64>(),
        PriorKind::Laplace => {
            // inverse CDF on u in (-1/2, 1/2)
            let u: f64 = rng.random::<f64>() - 0.5;
            -u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
        }
        PriorKind::Lognormal => LogNormal::new(0.0, 1.0).expect("valid").sample(rng),
        PriorKind::MultiGaussian => {
            let shift = if rng.random::<bool>() { 3.0 } else { 0.0 };
            shift + rng.sample::<f64, _>(StandardNormal)
        }
    }
}

/// `n x dim` i.i.d. samples.
pub fn sample_prior<R: Rng>(kind: PriorKind, dim: usize, n: usize, rng: &mut R) -> Tensor {
    let values = (0..n * dim).map(|_| draw(kind, rng)).collect();
    Tensor::matrix(n, dim, values).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn moments(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
    }

    #[test]
    fn gaussian_moments() {
        let t = sample_prior(
            PriorKind::StandardGaussian,
            2,
            100_000,
            &mut rng::from_seed(3),
        );
        for c in 0..2 {
            let col: Vec<f64> = (0..t.rows()).map(|r| t.at(r, c)).collect();
            let (m, v) = moments(&col);
            assert!(m.abs() < 0.02, "mean {m}");
            assert!((v - 1.0).abs() < 0.03, "var {v}");
        }
    }

    #[test]
    fn uniform_range_and_laplace_variance() {
        let u = sample_prior(PriorKind::Uniform, 3, 1000, &mut rng::from_seed(1));
        assert!(u.values().iter().all(|&x| (0.0..1.0).contains(&x)));
        let l = sample_prior(PriorKind::Laplace, 1, 100_000, &mut rng::from_seed(2));
        let (m, v) = moments(l.values());
        assert!(m.abs() < 0.03 && (v - 2.0).abs() < 0.08, "{m} {v}");
    }

    #[test]
    fn mixture_mean_and_lognormal_positive() {
        let t = sample_prior(PriorKind::MultiGaussian, 1, 100_000, &mut rng::from_seed(4));
        let (m, v) = moments(t.values());
        assert!((m - 1.5).abs() < 0.03 && (v - 3.25).abs() < 0.1, "{m} {v}");
        let ln = sample_prior(PriorKind::Lognormal, 2, 100, &mut rng::from_seed(5));
        assert!(ln.values().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn seeded_and_parsed() {
        let a = sample_prior(PriorKind::Laplace, 4, 5, &mut rng::from_seed(9));
        let b = sample_prior(PriorKind::Laplace, 4, 5, &mut rng::from_seed(9));
        assert_eq!(a, b);
        assert_eq!(
            "multi-gaussian".parse::<PriorKind>().unwrap(),
            PriorKind::MultiGaussian
        );
        assert!(matches!(
            "cauchy".parse::<PriorKind>(),
            Err(Error::Config(_))
        ));
    }
}
