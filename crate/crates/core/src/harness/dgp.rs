//! Simulation designs for variable selection and covariance-structure
//! selection.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{pack, ModelSpec, PanelDataset, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpFamily {
    /// Mean coefficients `(1.5, -1, 2, 1, beta)`; the first four are random
    /// with covariance `diag(2, 1.5, 1, 1.2)`, the fifth is fixed. The tested
    /// coordinate is the fifth mean.
    Varsel,
    /// Mean coefficients `(1.5, -1, 2, 1, 2)`, all random with a banded
    /// covariance of strength `alpha`. The tested block is the off-diagonal
    /// part of the Cholesky factor.
    Covstruct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpConfig {
    pub family: DgpFamily,
    pub n_individuals: usize,
    #[serde(default = "default_five")]
    pub n_occasions: usize,
    #[serde(default = "default_five")]
    pub n_alternatives: usize,
    /// Fifth mean coefficient (variable selection design).
    #[serde(default)]
    pub beta: f64,
    /// Correlation strength (covariance design).
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "default_sigma")]
    pub sigma_diag: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_five() -> usize {
    5
}

fn default_sigma() -> f64 {
    0.5
}

impl DgpConfig {
    pub fn varsel(n_individuals: usize, beta: f64, seed: u64) -> Self {
        Self {
            family: DgpFamily::Varsel,
            n_individuals,
            n_occasions: 5,
            n_alternatives: 5,
            beta,
            alpha: 0.0,
            sigma_diag: 0.5,
            seed,
        }
    }

    pub fn covstruct(n_individuals: usize, alpha: f64, seed: u64) -> Self {
        Self {
            family: DgpFamily::Covstruct,
            alpha,
            ..Self::varsel(n_individuals, 0.0, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_individuals == 0 || self.n_occasions < 2 || self.n_alternatives < 2 {
            return Err(Error::Config(
                "need at least one individual, two occasions and two alternatives".into(),
            ));
        }
        if !(self.sigma_diag > 0.0) {
            return Err(Error::Config("sigma_diag must be positive".into()));
        }
        if self.family == DgpFamily::Covstruct && !(0.0..1.0).contains(&self.alpha.abs()) {
            return Err(Error::Config(format!("alpha must lie in (-1, 1), got {}", self.alpha)));
        }
        Ok(())
    }

    /// Mean coefficients.
    pub fn mean_coefficients(&self) -> Vec<f64> {
        match self.family {
            DgpFamily::Varsel => vec![1.5, -1.0, 2.0, 1.0, self.beta],
            DgpFamily::Covstruct => vec![1.5, -1.0, 2.0, 1.0, 2.0],
        }
    }

    /// Covariance of the random coefficients.
    pub fn omega(&self) -> DMatrix<f64> {
        match self.family {
            DgpFamily::Varsel => DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.5, 1.0, 1.2])),
            DgpFamily::Covstruct => toeplitz_omega(self.alpha),
        }
    }

    /// The full (wide) model fitted to this design.
    pub fn model_spec(&self) -> ModelSpec {
        match self.family {
            DgpFamily::Varsel => {
                ModelSpec::new(5, 4, ModelSpec::diagonal_pattern(4), self.sigma_diag, vec![4], vec![0.0]).unwrap()
            }
            DgpFamily::Covstruct => {
                let base = ModelSpec::new(5, 5, ModelSpec::full_pattern(5), self.sigma_diag, vec![], vec![]).unwrap();
                let layout = base.layout();
                let gamma: Vec<usize> = base
                    .free_l_positions()
                    .iter()
                    .enumerate()
                    .filter(|(_, (r, c))| r != c)
                    .map(|(k, _)| 5 + k)
                    .collect();
                debug_assert_eq!(gamma.len(), 10);
                debug_assert!(layout[gamma[0]] == "L_21");
                let g0 = vec![0.0; gamma.len()];
                ModelSpec::new(5, 5, ModelSpec::full_pattern(5), self.sigma_diag, gamma, g0).unwrap()
            }
        }
    }

    /// Packed true parameter for [`DgpConfig::model_spec`].
    pub fn true_theta(&self) -> Theta {
        let l = self.omega().cholesky().expect("design covariance is positive definite").l();
        pack(&self.mean_coefficients(), &l, &self.model_spec()).expect("true parameter matches the design model")
    }

    fn random_columns(&self) -> usize {
        match self.family {
            DgpFamily::Varsel => 4,
            DgpFamily::Covstruct => 5,
        }
    }
}

/// Banded covariance with `alpha^|i-j|` among the first four coordinates and
/// an uncorrelated unit-variance fifth coordinate.
pub fn toeplitz_omega(alpha: f64) -> DMatrix<f64> {
    let mut m = DMatrix::identity(5, 5);
    for i in 0..4 {
        for j in 0..4 {
            m[(i, j)] = alpha.powi((i as i32 - j as i32).abs());
        }
    }
    m
}

/// Simulate a panel: covariates iid standard normal, one coefficient draw per
/// individual, iid normal errors, and the utility-maximizing choice (lowest
/// index on ties).
pub fn simulate_dataset(cfg: &DgpConfig) -> Result<PanelDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, t, k) = (cfg.n_individuals, cfg.n_occasions, cfg.n_alternatives);
    let p = 5;
    let q = cfg.random_columns();
    let mean = cfg.mean_coefficients();
    let chol = cfg
        .omega()
        .cholesky()
        .ok_or_else(|| Error::Config("design covariance is not positive definite".into()))?
        .l();
    let sd = cfg.sigma_diag.sqrt();
    let mut choices = Vec::with_capacity(n * t);
    let mut xf = Vec::with_capacity(n * t * k * p);
    let mut xr = Vec::with_capacity(n * t * k * q);
    let mut coef = vec![0.0; p];
    let mut z = vec![0.0; q];
    let mut x = vec![0.0; p];
    for _ in 0..n {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        coef.copy_from_slice(&mean);
        for r in 0..q {
            for c in 0..=r {
                coef[r] += chol[(r, c)] * z[c];
            }
        }
        for _ in 0..t {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for alt in 0..k {
                for v in x.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let e: f64 = StandardNormal.sample(&mut rng);
                let u: f64 = x.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>() + sd * e;
                if u > best.0 {
                    best = (u, alt);
                }
                xf.extend_from_slice(&x);
                xr.extend_from_slice(&x[..q]);
            }
            choices.push(best.1);
        }
    }
    PanelDataset::new(n, t, k, p, q, choices, xf, xr)
}
