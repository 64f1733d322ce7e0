//! Chi-square tail probabilities and quantiles, and Monte Carlo tails of
//! weighted sums of independent chi-square(1) variates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};

/// Survival function of the chi-square distribution with `p > 0` (possibly
/// fractional) degrees of freedom.
pub fn chisq_sf(x: f64, p: f64) -> f64 {
    assert!(p > 0.0, "degrees of freedom must be positive");
    if !(x > 0.0) {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    gamma_ur(0.5 * p, 0.5 * x)
}

/// Inverse of the chi-square distribution function: the `x` with
/// `P(X <= x) = q`. Solved by bisection on [`chisq_sf`].
pub fn chisq_quantile(q: f64, p: f64) -> f64 {
    assert!(p > 0.0, "degrees of freedom must be positive");
    assert!((0.0..1.0).contains(&q), "quantile level must lie in [0, 1)");
    if q == 0.0 {
        return 0.0;
    }
    let target = 1.0 - q;
    let mut hi = p.max(1.0);
    while chisq_sf(hi, p) > target {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chisq_sf(mid, p) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Weights and Monte Carlo settings for `sum_j lambda_j K_j^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub lambdas: Vec<f64>,
    pub draws: usize,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn new(lambdas: Vec<f64>, draws: usize, seed: u64) -> Result<Self> {
        let spec = Self { lambdas, draws, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() {
            return Err(Error::InvalidArgument("mixture needs at least one weight".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument(format!("mixture weight {l} is not positive")));
        }
        if self.draws == 0 {
            return Err(Error::InvalidArgument("mixture needs at least one draw".into()));
        }
        Ok(())
    }
}

/// Monte Carlo tail probability `P(sum_j lambda_j K_j^2 > x)`, deterministic
/// for a given seed.
pub fn weighted_chisq_sf(x: f64, spec: &MixtureSpec) -> Result<f64> {
    spec.validate()?;
    if !(x > 0.0) {
        return Ok(1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut exceed = 0usize;
    for _ in 0..spec.draws {
        let mut s = 0.0;
        for &l in &spec.lambdas {
            let k: f64 = StandardNormal.sample(&mut rng);
            s += l * k * k;
        }
        if s > x {
            exceed += 1;
        }
    }
    Ok(exceed as f64 / spec.draws as f64)
}
