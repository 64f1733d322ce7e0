//! Maximization of the composite likelihood under coordinate restrictions and
//! estimation of the Godambe information.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cml::{lcml, lcml_and_gradient, score, CmlContext, ScoreMethod, ScoreSet};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, PanelDataset, Restriction, Theta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Gradient tolerance relative to `max(1, |lcml| / N)`.
    pub grad_tol: f64,
    pub step_tol: f64,
    pub score_method: ScoreMethod,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-5,
            step_tol: 1e-9,
            score_method: ScoreMethod::Analytic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gradient,
    StepSize,
    MaxIterations,
    LineSearch,
    NoFreeCoordinates,
}

/// Result of one maximization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub theta_hat: Theta,
    pub lcml_value: f64,
    pub restriction: Restriction,
    pub n_iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// Infinity norm of the gradient over the free coordinates.
    pub grad_norm: f64,
    pub grad_tolerance: f64,
    pub context: CmlContext,
    pub spec: ModelSpec,
    pub n_individuals: usize,
    /// [`PanelDataset::fingerprint`] of the data the fit used.
    #[serde(default)]
    pub data_fingerprint: u64,
}

impl Fit {
    pub fn restricted(&self) -> bool {
        !self.restriction.is_empty()
    }

    /// Indices not pinned by the restriction.
    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.theta_hat.len())
            .filter(|i| !self.restriction.indices.contains(i))
            .collect()
    }

    /// Error unless the fit converged.
    pub fn ensure_converged(&self) -> Result<()> {
        if self.converged {
            return Ok(());
        }
        Err(match self.termination {
            Termination::LineSearch => Error::LineSearch(format!(
                "no sufficient increase after {} iterations (gradient norm {:e})",
                self.n_iterations, self.grad_norm
            )),
            _ => Error::NonFinite(format!(
                "fit stopped by {:?} after {} iterations with gradient norm {:e}",
                self.termination, self.n_iterations, self.grad_norm
            )),
        })
    }
}

fn free_norm(g: &[f64], free: &[usize]) -> f64 {
    free.iter().fold(0.0f64, |a, &i| a.max(g[i].abs()))
}

/// Quasi-Newton ascent of `lcml` over the coordinates not pinned by
/// `restriction`. Restricted coordinates are set to their values before the
/// first evaluation and never move.
pub fn fit(
    data: &PanelDataset,
    spec: &ModelSpec,
    init: &Theta,
    restriction: Option<&Restriction>,
    ctx: &CmlContext,
    opts: &FitOptions,
) -> Result<Fit> {
    spec.validate()?;
    init.check(spec)?;
    let restriction = restriction.cloned().unwrap_or_default();
    if let Some(&i) = restriction.indices.iter().find(|&&i| i >= spec.dim()) {
        return Err(Error::InvalidArgument(format!("restricted index {i} outside 0..{}", spec.dim())));
    }
    let mut x = init.values.clone();
    restriction.apply(&mut x);
    let free: Vec<usize> = (0..x.len()).filter(|i| !restriction.indices.contains(i)).collect();
    let n = data.n_individuals() as f64;

    let eval = |th: &[f64]| -> Result<(f64, Vec<f64>)> {
        match opts.score_method {
            ScoreMethod::Analytic => lcml_and_gradient(data, th, spec, ctx),
            ScoreMethod::FiniteDifference => {
                let s = score(data, th, spec, ctx, ScoreMethod::FiniteDifference)?;
                Ok((lcml(data, th, spec, ctx)?, s.total.as_slice().to_vec()))
            }
        }
    };
    let finish = |x: Vec<f64>, f: f64, g: &[f64], iters: usize, term: Termination| {
        let tol = opts.grad_tol * (f.abs() / n).max(1.0);
        let gn = free_norm(g, &free);
        Fit {
            theta_hat: Theta::new(x, spec),
            lcml_value: f,
            restriction: restriction.clone(),
            n_iterations: iters,
            converged: gn <= tol && matches!(term, Termination::Gradient | Termination::StepSize | Termination::NoFreeCoordinates),
            termination: term,
            grad_norm: gn,
            grad_tolerance: tol,
            context: ctx.clone(),
            spec: spec.clone(),
            n_individuals: data.n_individuals(),
            data_fingerprint: data.fingerprint(),
        }
    };

    if free.is_empty() {
        let f = lcml(data, &x, spec, ctx)?;
        return Ok(finish(x, f, &[], 0, Termination::NoFreeCoordinates));
    }

    let m = free.len();
    let (mut f, mut g) = eval(&x)?;
    let gather = |g: &[f64]| DVector::from_iterator(m, free.iter().map(|&i| g[i]));
    let mut gv = gather(&g);
    // inverse Hessian of -lcml, scaled once the first curvature pair arrives
    let mut hinv = DMatrix::<f64>::identity(m, m) / gv.amax().max(1.0);
    let mut scaled = false;
    let c1 = 1e-4;

    for iter in 0..opts.max_iter {
        let tol = opts.grad_tol * (f.abs() / n).max(1.0);
        if gv.amax() <= tol {
            return Ok(finish(x, f, &g, iter, Termination::Gradient));
        }
        let mut dir = &hinv * &gv;
        let mut slope = gv.dot(&dir);
        if !(slope > 0.0) {
            hinv = DMatrix::identity(m, m) / gv.amax().max(1.0);
            dir = &hinv * &gv;
            slope = gv.dot(&dir);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut xt = x.clone();
            for (k, &i) in free.iter().enumerate() {
                xt[i] += step * dir[k];
            }
            match eval(&xt) {
                Ok((ft, gt)) if ft.is_finite() && ft >= f + c1 * step * slope => {
                    accepted = Some((xt, ft, gt));
                    break;
                }
                Ok(_) => {}
                Err(e) if e.is_numerical() => {}
                Err(e) => return Err(e),
            }
            step *= 0.5;
            if step * dir.amax() <= opts.step_tol {
                break;
            }
        }
        let Some((xt, ft, gt)) = accepted else {
            let term = if step * dir.amax() <= opts.step_tol {
                Termination::StepSize
            } else {
                Termination::LineSearch
            };
            return Ok(finish(x, f, &g, iter, term));
        };
        let s = DVector::from_iterator(m, free.iter().map(|&i| xt[i] - x[i]));
        let gvt = gather(&gt);
        // curvature pair for the minimization of -lcml
        let y = &gv - &gvt;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if !scaled {
                hinv = DMatrix::identity(m, m) * (sy / y.dot(&y));
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 y'Hy + rho) s s'
            hinv -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        let step_norm = s.amax();
        x = xt;
        f = ft;
        g = gt;
        gv = gvt;
        if step_norm <= opts.step_tol {
            return Ok(finish(x, f, &g, iter + 1, Termination::StepSize));
        }
    }
    let iters = opts.max_iter;
    let tol = opts.grad_tol * (f.abs() / n).max(1.0);
    let term = if gv.amax() <= tol {
        Termination::Gradient
    } else {
        Termination::MaxIterations
    };
    Ok(finish(x, f, &g, iters, term))
}

/// Which sensitivity estimate enters the Godambe matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityEstimator {
    /// Central-difference Hessian of the score.
    Hessian,
    /// Mean of per-pair score outer products.
    #[default]
    PairwiseOuter,
}

/// `(1/N) sum_n sum_pairs s_ntt' s_ntt''`.
pub fn estimate_h1(scores: &ScoreSet) -> DMatrix<f64> {
    let d = scores.dim;
    let mut h = DMatrix::zeros(d, d);
    for row in scores.per_pair.chunks(d) {
        let v = DVector::from_column_slice(row);
        h.syger(1.0, &v, &v, 1.0);
    }
    h.fill_upper_triangle_with_lower_triangle();
    h / scores.n_individuals() as f64
}

/// `(1/N) sum_n s_n s_n'`.
pub fn estimate_j(scores: &ScoreSet) -> DMatrix<f64> {
    let d = scores.dim;
    let mut j = DMatrix::zeros(d, d);
    for r in scores.per_individual.row_iter() {
        let v = r.transpose();
        j.syger(1.0, &v, &v, 1.0);
    }
    j.fill_upper_triangle_with_lower_triangle();
    j / scores.n_individuals() as f64
}

/// Symmetrized central-difference Jacobian of `grad` at `x`, with step
/// `eps^(1/3) * max(1, |x_i|)`.
pub fn jacobian_of_gradient<F>(grad: F, x: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let d = x.len();
    let mut out = DMatrix::zeros(d, d);
    let mut xt = x.to_vec();
    for i in 0..d {
        let h = f64::EPSILON.cbrt() * x[i].abs().max(1.0);
        xt[i] = x[i] + h;
        let up = grad(&xt)?;
        xt[i] = x[i] - h;
        let dn = grad(&xt)?;
        xt[i] = x[i];
        let width = (x[i] + h) - (x[i] - h);
        for k in 0..d {
            out[(k, i)] = (up[k] - dn[k]) / width;
        }
    }
    let sym = (&out + out.transpose()) * 0.5;
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Hessian".into()));
    }
    Ok(sym)
}

/// `-(1/N)` times the Hessian of `lcml` at the fitted value.
pub fn estimate_h_hessian(data: &PanelDataset, fit: &Fit) -> Result<DMatrix<f64>> {
    let n = data.n_individuals() as f64;
    let hess = jacobian_of_gradient(
        |th| Ok(lcml_and_gradient(data, th, &fit.spec, &fit.context)?.1),
        &fit.theta_hat.values,
    )?;
    Ok(hess * (-1.0 / n))
}

/// `H`, `J`, `G = H J^{-1} H` and the tested-block views of their inverses.
#[derive(Debug, Clone, PartialEq)]
pub struct GodambeEstimates {
    pub h: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub which_h: SensitivityEstimator,
    pub gamma_indices: Vec<usize>,
    /// True when `J` had to be pseudo-inverted.
    pub j_pseudo_inverse: bool,
}

/// Moore-Penrose inverse of a symmetric matrix with a relative rank cut.
pub fn pinv_symmetric(a: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let eig = nalgebra::SymmetricEigen::new((a + a.transpose()) * 0.5);
    let amax = eig.eigenvalues.amax();
    let cut = amax * 1e-12 * a.nrows().max(1) as f64;
    let mut rank = 0;
    let inv_vals = eig.eigenvalues.map(|v| {
        if v.abs() > cut && v != 0.0 {
            rank += 1;
            1.0 / v
        } else {
            0.0
        }
    });
    (&eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose(), rank)
}

fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|c| c.inverse())
}

/// Extract the `idx x idx` block.
pub fn sub_block(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

pub fn godambe(h: DMatrix<f64>, j: DMatrix<f64>, which_h: SensitivityEstimator, gamma_indices: &[usize]) -> Result<GodambeEstimates> {
    let d = h.nrows();
    if h.ncols() != d || j.nrows() != d || j.ncols() != d {
        return Err(Error::DimensionMismatch {
            what: "Godambe blocks".into(),
            expected: d,
            got: j.nrows(),
        });
    }
    if let Some(&g) = gamma_indices.iter().find(|&&g| g >= d) {
        return Err(Error::InvalidArgument(format!("gamma index {g} outside 0..{d}")));
    }
    let (jinv, pseudo) = match spd_inverse(&j) {
        Some(inv) => (inv, false),
        None => {
            let (p, rank) = pinv_symmetric(&j);
            warn!("variability matrix is singular (rank {rank} of {d}); using the pseudo-inverse");
            (p, true)
        }
    };
    let g = &h * &jinv * &h;
    let g = (&g + g.transpose()) * 0.5;
    Ok(GodambeEstimates {
        h,
        j,
        g,
        which_h,
        gamma_indices: gamma_indices.to_vec(),
        j_pseudo_inverse: pseudo,
    })
}

impl GodambeEstimates {
    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn h_inverse(&self) -> Result<DMatrix<f64>> {
        self.h
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("sensitivity matrix".into()))
    }

    /// `G^{-1} = H^{-1} J H^{-1}`.
    pub fn g_inverse(&self) -> Result<DMatrix<f64>> {
        let hi = self.h_inverse()?;
        let gi = &hi * &self.j * hi.transpose();
        Ok((&gi + gi.transpose()) * 0.5)
    }

    /// Tested block of `H^{-1}`.
    pub fn h_gamma_gamma(&self) -> Result<DMatrix<f64>> {
        Ok(sub_block(&self.h_inverse()?, &self.gamma_indices, &self.gamma_indices))
    }

    /// Tested block of `G^{-1}`.
    pub fn g_gamma_gamma(&self) -> Result<DMatrix<f64>> {
        Ok(sub_block(&self.g_inverse()?, &self.gamma_indices, &self.gamma_indices))
    }

    /// Godambe quantities restricted to the coordinates in `idx`, as for a
    /// model whose other coordinates are held fixed.
    pub fn restrict_to(&self, idx: &[usize]) -> Result<GodambeEstimates> {
        let gamma: Vec<usize> = self
            .gamma_indices
            .iter()
            .filter_map(|g| idx.iter().position(|i| i == g))
            .collect();
        godambe(sub_block(&self.h, idx, idx), sub_block(&self.j, idx, idx), self.which_h, &gamma)
    }
}

/// Scores at the fitted value and the Godambe estimates built from them.
pub fn godambe_at_fit(
    data: &PanelDataset,
    fit: &Fit,
    which_h: SensitivityEstimator,
    method: ScoreMethod,
) -> Result<(ScoreSet, GodambeEstimates)> {
    let scores = score(data, &fit.theta_hat.values, &fit.spec, &fit.context, method)?;
    let h = match which_h {
        SensitivityEstimator::PairwiseOuter => estimate_h1(&scores),
        SensitivityEstimator::Hessian => estimate_h_hessian(data, fit)?,
    };
    let j = estimate_j(&scores);
    let est = godambe(h, j, which_h, &fit.spec.gamma_indices)?;
    Ok((scores, est))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;

    fn scoreset(per_pair: Vec<f64>, n: usize, np: usize, d: usize) -> ScoreSet {
        let mut per_individual = DMatrix::zeros(n, d);
        for i in 0..n {
            for k in 0..np {
                for j in 0..d {
                    per_individual[(i, j)] += per_pair[(i * np + k) * d + j];
                }
            }
        }
        let total = DVector::from_iterator(d, (0..d).map(|j| per_individual.column(j).sum()));
        ScoreSet {
            dim: d,
            n_pairs: np,
            per_individual,
            per_pair,
            total,
        }
    }

    #[test]
    fn single_pair_is_rank_one() {
        let s = scoreset(vec![1.0, -2.0, 0.5], 1, 1, 3);
        let h1 = estimate_h1(&s);
        let j = estimate_j(&s);
        assert_eq!(h1, j);
        let eig = SymmetricEigen::new(h1.clone()).eigenvalues;
        assert_eq!(eig.iter().filter(|v| v.abs() > 1e-12).count(), 1);
        assert_eq!(h1[(0, 1)], -2.0);
    }

    #[test]
    fn outer_products_are_psd() {
        let vals: Vec<f64> = (0..4 * 3 * 3).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let s = scoreset(vals, 4, 3, 3);
        for m in [estimate_h1(&s), estimate_j(&s)] {
            assert!(SymmetricEigen::new(m.clone()).eigenvalues.min() >= -1e-10);
            assert_eq!(m, m.transpose());
        }
    }

    #[test]
    fn quadratic_hessian_is_recovered() {
        // f(x) = -0.5 x'Ax + b'x, gradient b - A x, Hessian -A
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, -0.5, 1.0, 3.0, 0.2, -0.5, 0.2, 2.0]);
        let b = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let grad = |x: &[f64]| -> Result<Vec<f64>> {
            let xv = DVector::from_column_slice(x);
            Ok((&b - &a * xv).as_slice().to_vec())
        };
        let h = jacobian_of_gradient(grad, &[0.5, -2.0, 10.0]).unwrap();
        assert!((h + &a).amax() < 1e-6);
    }

    #[test]
    fn information_identity_case() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let est = godambe(h.clone(), h.clone(), SensitivityEstimator::PairwiseOuter, &[1]).unwrap();
        assert!((&est.g - &h).amax() < 1e-12);
        assert!((est.g_inverse().unwrap() - est.h_inverse().unwrap()).amax() < 1e-12);
    }

    #[test]
    fn two_by_two_against_dense_algebra() {
        let h = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let j = DMatrix::from_row_slice(2, 2, &[2.0, -0.5, -0.5, 1.5]);
        let est = godambe(h.clone(), j.clone(), SensitivityEstimator::PairwiseOuter, &[1]).unwrap();
        // J^{-1} by the 2x2 formula
        let det = 2.0 * 1.5 - 0.25;
        let jinv = DMatrix::from_row_slice(2, 2, &[1.5 / det, 0.5 / det, 0.5 / det, 2.0 / det]);
        let want = &h * jinv * &h;
        assert!((&est.g - &want).amax() < 1e-12);
        assert!((&est.g - est.g.transpose()).amax() < 1e-12);
        // H^{gg} = [H^{-1}]_{22} = 3 / 5
        assert!((est.h_gamma_gamma().unwrap()[(0, 0)] - 0.6).abs() < 1e-14);
    }

    #[test]
    fn gamma_blocks_match_reordered_trailing_blocks() {
        let d = 5;
        let a = DMatrix::from_fn(d, d, |i, j| ((i * 7 + j * 3) % 5) as f64 / 5.0 - 0.4);
        let h = &a * a.transpose() + DMatrix::identity(d, d) * 2.0;
        let b = DMatrix::from_fn(d, d, |i, j| ((i * 2 + j * 5) % 7) as f64 / 7.0 - 0.5);
        let j = &b * b.transpose() + DMatrix::identity(d, d);
        let gamma = [3usize, 1];
        let est = godambe(h.clone(), j.clone(), SensitivityEstimator::PairwiseOuter, &gamma).unwrap();
        // reorder so that gamma comes last
        let order = [0usize, 2, 4, 3, 1];
        let hp = sub_block(&h, &order, &order);
        let jp = sub_block(&j, &order, &order);
        let est_p = godambe(hp, jp, SensitivityEstimator::PairwiseOuter, &[3, 4]).unwrap();
        let tail = |m: DMatrix<f64>| m.view((3, 3), (2, 2)).into_owned();
        assert!((tail(est_p.h_inverse().unwrap()) - est.h_gamma_gamma().unwrap()).amax() < 1e-12);
        assert!((tail(est_p.g_inverse().unwrap()) - est.g_gamma_gamma().unwrap()).amax() < 1e-12);
    }

    #[test]
    fn singular_variability_uses_pseudo_inverse() {
        let h = DMatrix::identity(2, 2);
        let j = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let est = godambe(h, j, SensitivityEstimator::PairwiseOuter, &[]).unwrap();
        assert!(est.j_pseudo_inverse);
        assert!((est.g[(0, 0)] - 0.25).abs() < 1e-12);
    }
}
