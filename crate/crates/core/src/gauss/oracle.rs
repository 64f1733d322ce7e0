//! Brute-force Monte Carlo evaluation of multivariate normal orthant
//! probabilities, used to check the analytic approximation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const PSD_TOLERANCE: f64 = -1e-10;

/// Symmetric square-root style factor `A` with `A A' = R`, valid for singular
/// PSD matrices as well.
pub fn psd_factor(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if r.nrows() != r.ncols() {
        return Err(Error::DimensionMismatch {
            what: "covariance matrix".into(),
            expected: r.nrows(),
            got: r.ncols(),
        });
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance matrix".into()));
    }
    let sym = 0.5 * (r + r.transpose());
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if min < PSD_TOLERANCE {
        return Err(Error::NotPsd(min));
    }
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals))
}

/// Monte Carlo estimate of `P(u <= b)` for `u ~ N(0, R)` with antithetic
/// pairs. Returns the estimate and its standard error.
pub fn mvncdf_oracle(b: &[f64], r: &DMatrix<f64>, n_draws: usize, seed: u64) -> Result<(f64, f64)> {
    let d = b.len();
    if r.nrows() != d {
        return Err(Error::DimensionMismatch {
            what: "covariance matrix".into(),
            expected: d,
            got: r.nrows(),
        });
    }
    if n_draws < 2 {
        return Err(Error::InvalidArgument("need at least two draws".into()));
    }
    let a = psd_factor(r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = n_draws / 2;
    let mut z = DVector::<f64>::zeros(d);
    let mut x = DVector::<f64>::zeros(d);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..pairs {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        x.gemv(1.0, &a, &z, 0.0);
        let plus = x.iter().zip(b).all(|(xi, bi)| *xi <= *bi);
        let minus = x.iter().zip(b).all(|(xi, bi)| -*xi <= *bi);
        let y = 0.5 * (plus as u8 as f64 + minus as u8 as f64);
        sum += y;
        sum_sq += y * y;
    }
    let n = pairs as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}
