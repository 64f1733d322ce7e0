//! Model averaging over candidates that pin subsets of the gamma
//! coordinates: information-criterion weights and weights minimizing the
//! asymptotic mean squared error of a focus parameter under local
//! misspecification.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cml::{pair_loglik, score, CmlContext};
use crate::error::{Error, Result};
use crate::estimation::{estimate_h1, estimate_h_hessian, estimate_j, godambe, pinv_symmetric, sub_block, Fit, GodambeEstimates, SensitivityEstimator};
use crate::model::{ModelSpec, PanelDataset, Theta};
use crate::selection::{information_criteria, ComparisonOptions, ICResult};

/// `w_m = exp(-0.5 (IC_m - min IC))`, normalized.
pub fn ic_weights(ics: &[f64]) -> Vec<f64> {
    if ics.is_empty() {
        return Vec::new();
    }
    let min = ics.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = ics.iter().map(|v| (-0.5 * (v - min)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Unit weight on the candidate with the smallest criterion (first on ties).
pub fn select_weights(ics: &[f64]) -> Vec<f64> {
    let best = ics
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc })
        .0;
    (0..ics.len()).map(|i| if i == best { 1.0 } else { 0.0 }).collect()
}

/// Scalar target whose mean squared error the weights minimize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Focus {
    Coordinate { index: usize },
    Linear { weights: Vec<f64> },
    /// Summed mean squared error over several coordinates.
    CoordSet { indices: Vec<usize> },
    /// Approximated probability of the observed choices on occasions
    /// `t < t2` of one individual.
    PairProbability { individual: usize, t: usize, t2: usize },
}

impl Focus {
    fn check(&self, d: usize) -> Result<()> {
        let bad = |i: usize| Error::InvalidArgument(format!("focus coordinate {i} outside 0..{d}"));
        match self {
            Focus::Coordinate { index } if *index >= d => Err(bad(*index)),
            Focus::Linear { weights } if weights.len() != d => Err(Error::DimensionMismatch {
                what: "linear focus".into(),
                expected: d,
                got: weights.len(),
            }),
            Focus::CoordSet { indices } if indices.is_empty() => Err(Error::InvalidArgument("empty focus set".into())),
            Focus::CoordSet { indices } => match indices.iter().find(|&&i| i >= d) {
                Some(&i) => Err(bad(i)),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    /// Value at `theta`; `None` for a coordinate set.
    pub fn value(&self, theta: &[f64], data: &PanelDataset, spec: &ModelSpec, ctx: &CmlContext) -> Result<Option<f64>> {
        self.check(theta.len())?;
        Ok(match self {
            Focus::Coordinate { index } => Some(theta[*index]),
            Focus::Linear { weights } => Some(weights.iter().zip(theta).map(|(a, b)| a * b).sum()),
            Focus::CoordSet { .. } => None,
            Focus::PairProbability { individual, t, t2 } => {
                Some(pair_loglik(data, *individual, *t, *t2, theta, spec, ctx)?.exp())
            }
        })
    }

    /// Gradients of the focus components at `theta`, one row each.
    pub fn gradients(&self, theta: &[f64], data: &PanelDataset, spec: &ModelSpec, ctx: &CmlContext) -> Result<DMatrix<f64>> {
        let d = theta.len();
        self.check(d)?;
        let g = match self {
            Focus::Coordinate { index } => DMatrix::from_fn(1, d, |_, c| if c == *index { 1.0 } else { 0.0 }),
            Focus::Linear { weights } => DMatrix::from_row_slice(1, d, weights),
            Focus::CoordSet { indices } => DMatrix::from_fn(indices.len(), d, |r, c| if c == indices[r] { 1.0 } else { 0.0 }),
            Focus::PairProbability { individual, t, t2 } => {
                let f = |th: &[f64]| pair_loglik(data, *individual, *t, *t2, th, spec, ctx).map(f64::exp);
                let mut out = DMatrix::zeros(1, d);
                let mut th = theta.to_vec();
                for i in 0..d {
                    let h = f64::EPSILON.cbrt() * theta[i].abs().max(1.0);
                    th[i] = theta[i] + h;
                    let up = f(&th)?;
                    th[i] = theta[i] - h;
                    let dn = f(&th)?;
                    th[i] = theta[i];
                    out[(0, i)] = (up - dn) / ((theta[i] + h) - (theta[i] - h));
                }
                out
            }
        };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("focus gradient".into()));
        }
        Ok(g)
    }
}

/// Candidate fits sharing data, approximation context and parameterization.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub fits: Vec<Fit>,
    pub wide_index: usize,
}

impl CandidateSet {
    pub fn new(fits: Vec<Fit>) -> Result<Self> {
        let first = fits.first().ok_or_else(|| Error::InvalidArgument("no candidate models".into()))?;
        let spec = &first.spec;
        for (m, f) in fits.iter().enumerate() {
            if !f.spec.same_family(spec) {
                return Err(Error::Mismatch(format!("candidate {m} uses a different parameterization")));
            }
            if f.context != first.context || f.data_fingerprint != first.data_fingerprint || f.n_individuals != first.n_individuals {
                return Err(Error::Mismatch(format!("candidate {m} was fitted on other data or context")));
            }
            for (k, &i) in f.restriction.indices.iter().enumerate() {
                let pos = spec.gamma_indices.iter().position(|&g| g == i).ok_or_else(|| {
                    Error::InvalidArgument(format!("candidate {m} pins coordinate {i}, which is not a gamma coordinate"))
                })?;
                if f.restriction.values[k] != spec.gamma0[pos] {
                    return Err(Error::InvalidArgument(format!(
                        "candidate {m} pins coordinate {i} at {} instead of {}",
                        f.restriction.values[k], spec.gamma0[pos]
                    )));
                }
            }
        }
        let wide_index = fits
            .iter()
            .position(|f| f.restriction.is_empty())
            .ok_or_else(|| Error::InvalidArgument("no candidate leaves every coordinate free".into()))?;
        Ok(Self { fits, wide_index })
    }

    pub fn len(&self) -> usize {
        self.fits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fits.is_empty()
    }

    pub fn wide(&self) -> &Fit {
        &self.fits[self.wide_index]
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.wide().spec
    }
}

/// Ingredients of the asymptotic mean squared error of the averaged focus.
#[derive(Debug, Clone)]
pub struct AveragingProblem {
    /// `sqrt(N) (gamma_wide - gamma0)`.
    pub delta_hat: DVector<f64>,
    pub h: DMatrix<f64>,
    pub j: DMatrix<f64>,
    /// `E_m (pi_m H pi_m')^{-1} pi_m`, one `d x d` matrix per candidate.
    pub lambda: Vec<DMatrix<f64>>,
    /// `dmu Lambda_m H_gamma - d_gamma mu`, one row per focus component.
    pub lambda_bias: Vec<DMatrix<f64>>,
    pub f: DMatrix<f64>,
    pub rank_f: usize,
    pub min_eigen_f: f64,
    pub weights: Vec<f64>,
}

/// `E_m (pi_m H pi_m')^{-1} pi_m` for the coordinates in `free`.
pub fn lambda_matrix(h: &DMatrix<f64>, free: &[usize]) -> Result<DMatrix<f64>> {
    let d = h.nrows();
    let mut out = DMatrix::zeros(d, d);
    if free.is_empty() {
        return Ok(out);
    }
    let block = sub_block(h, free, free);
    let inv = block
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Singular("sensitivity block of a candidate".into()))?;
    for (a, &i) in free.iter().enumerate() {
        for (b, &k) in free.iter().enumerate() {
            out[(i, k)] = inv[(a, b)];
        }
    }
    Ok(out)
}

/// `F_ij = lambda_i delta delta' lambda_j' + dmu Lambda_i J (dmu Lambda_j)'`,
/// summed over focus components.
pub fn assemble_f(
    grads: &DMatrix<f64>,
    lambdas: &[DMatrix<f64>],
    h: &DMatrix<f64>,
    j: &DMatrix<f64>,
    gamma: &[usize],
    delta: &DVector<f64>,
) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let m = lambdas.len();
    let d = h.nrows();
    let all: Vec<usize> = (0..d).collect();
    let h_gamma = sub_block(h, &all, gamma);
    let dmu_gamma = sub_block(grads, &(0..grads.nrows()).collect::<Vec<_>>(), gamma);
    let mut f = DMatrix::zeros(m, m);
    let mut biases = Vec::with_capacity(m);
    // per component: bias scalars b_m = lambda_m delta and rows a_m = dmu Lambda_m
    let rows: Vec<DMatrix<f64>> = lambdas.iter().map(|l| grads * l).collect();
    for r in &rows {
        biases.push(r * &h_gamma - &dmu_gamma);
    }
    for c in 0..grads.nrows() {
        let b: Vec<f64> = biases.iter().map(|bm| (bm.row(c) * delta)[0]).collect();
        let a: Vec<DVector<f64>> = rows.iter().map(|r| r.row(c).transpose()).collect();
        let ja: Vec<DVector<f64>> = a.iter().map(|v| j * v).collect();
        for p in 0..m {
            for q in 0..m {
                f[(p, q)] += b[p] * b[q] + a[p].dot(&ja[q]);
            }
        }
    }
    let f = (&f + f.transpose()) * 0.5;
    (f, biases)
}

/// Closed-form minimizer of `w'Fw` subject to `sum w = 1` through the
/// pseudo-inverse; equal weights if `1'F^+1` vanishes.
pub fn solve_weights(f: &DMatrix<f64>) -> Vec<f64> {
    let m = f.nrows();
    if m == 0 {
        return Vec::new();
    }
    let (pinv, _) = pinv_symmetric(f);
    let v = pinv * DVector::from_element(m, 1.0);
    let denom = v.sum();
    if !(denom > 1e-12) || v.iter().any(|x| !x.is_finite()) {
        warn!("1'F^+1 = {denom:e}; falling back to equal weights");
        return vec![1.0 / m as f64; m];
    }
    v.iter().map(|x| x / denom).collect()
}

/// Builds the problem at the wide fit. `g` holds `H` and `J` over all
/// coordinates at that fit.
pub fn build_problem(
    cands: &CandidateSet,
    focus: &Focus,
    g: &GodambeEstimates,
    data: &PanelDataset,
) -> Result<AveragingProblem> {
    let wide = cands.wide();
    let spec = cands.spec();
    let d = spec.dim();
    if g.dim() != d {
        return Err(Error::DimensionMismatch {
            what: "Godambe estimates at the wide fit".into(),
            expected: d,
            got: g.dim(),
        });
    }
    let sqrt_n = (wide.n_individuals as f64).sqrt();
    let delta_hat = DVector::from_iterator(
        spec.gamma_indices.len(),
        spec.gamma_indices
            .iter()
            .zip(&spec.gamma0)
            .map(|(&i, g0)| sqrt_n * (wide.theta_hat.values[i] - g0)),
    );
    let lambda = cands
        .fits
        .iter()
        .enumerate()
        .map(|(m, f)| {
            lambda_matrix(&g.h, &f.free_indices()).map_err(|_| Error::Singular(format!("sensitivity block of candidate {m}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let grads = focus.gradients(&wide.theta_hat.values, data, spec, &wide.context)?;
    let (f, lambda_bias) = assemble_f(&grads, &lambda, &g.h, &g.j, &spec.gamma_indices, &delta_hat);
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mean squared error matrix".into()));
    }
    let eig = SymmetricEigen::new(f.clone()).eigenvalues;
    let min_eigen_f = eig.min();
    let cut = eig.amax() * 1e-12 * f.nrows() as f64;
    let rank_f = eig.iter().filter(|v| v.abs() > cut && **v != 0.0).count();
    if min_eigen_f < -1e-8 * eig.amax().max(1.0) {
        warn!("mean squared error matrix has eigenvalue {min_eigen_f:e}");
    }
    let weights = solve_weights(&f);
    Ok(AveragingProblem {
        delta_hat,
        h: g.h.clone(),
        j: g.j.clone(),
        lambda,
        lambda_bias,
        f,
        rank_f,
        min_eigen_f,
        weights,
    })
}

/// `sum_m w_m theta_m`, where pinned coordinates enter at their pin value.
pub fn average_estimates(cands: &CandidateSet, weights: &[f64]) -> Result<Theta> {
    if weights.len() != cands.len() {
        return Err(Error::DimensionMismatch {
            what: "averaging weights".into(),
            expected: cands.len(),
            got: weights.len(),
        });
    }
    let d = cands.spec().dim();
    let mut out = vec![0.0; d];
    for (f, w) in cands.fits.iter().zip(weights) {
        let mut th = f.theta_hat.values.clone();
        f.restriction.apply(&mut th);
        for (o, v) in out.iter_mut().zip(&th) {
            *o += w * v;
        }
    }
    Ok(Theta::new(out, cands.spec()))
}

/// Criteria and Godambe estimates for every candidate.
#[derive(Debug, Clone)]
pub struct AveragingInput {
    pub candidates: CandidateSet,
    pub ics: Vec<ICResult>,
    pub problem: AveragingProblem,
    pub focus: Focus,
}

impl AveragingInput {
    pub fn new(
        data: &PanelDataset,
        candidates: CandidateSet,
        focus: Focus,
        opts: &ComparisonOptions,
    ) -> Result<Self> {
        if candidates.wide().data_fingerprint != data.fingerprint() {
            return Err(Error::Mismatch("dataset differs from the one the candidates used".into()));
        }
        let mut ics = Vec::with_capacity(candidates.len());
        let mut wide_g = None;
        for (m, fit) in candidates.fits.iter().enumerate() {
            let s = score(data, &fit.theta_hat.values, &fit.spec, &fit.context, opts.score_method)?;
            let h = match opts.sensitivity {
                SensitivityEstimator::PairwiseOuter => estimate_h1(&s),
                SensitivityEstimator::Hessian => estimate_h_hessian(data, fit)?,
            };
            let j = estimate_j(&s);
            let pen = opts.penalty.indices(fit);
            let own = godambe(sub_block(&h, &pen, &pen), sub_block(&j, &pen, &pen), opts.sensitivity, &[])?;
            ics.push(information_criteria(fit, &own)?);
            if m == candidates.wide_index {
                wide_g = Some(godambe(h, j, opts.sensitivity, &fit.spec.gamma_indices)?);
            }
        }
        let problem = build_problem(&candidates, &focus, wide_g.as_ref().unwrap(), data)?;
        Ok(Self {
            candidates,
            ics,
            problem,
            focus,
        })
    }
}

/// Weights, averaged estimate and averaged focus value of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragingOutcome {
    pub method: String,
    pub weights: Vec<f64>,
    pub theta: Theta,
    /// `sum_m w_m mu(theta_m)`; absent for a coordinate-set focus.
    pub focus_value: Option<f64>,
}

/// A rule assigning weights to the candidates.
pub trait AveragingMethod: Send + Sync {
    fn name(&self) -> &str;
    fn weights(&self, input: &AveragingInput) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy)]
enum Criterion {
    Claic,
    Clbic,
}

impl Criterion {
    fn values(self, ics: &[ICResult]) -> Vec<f64> {
        ics.iter()
            .map(|ic| match self {
                Criterion::Claic => ic.claic,
                Criterion::Clbic => ic.clbic,
            })
            .collect()
    }
}

struct Select(Criterion, &'static str);
struct IcAverage(Criterion, &'static str);
struct MseOptimal;

impl AveragingMethod for Select {
    fn name(&self) -> &str {
        self.1
    }
    fn weights(&self, input: &AveragingInput) -> Result<Vec<f64>> {
        Ok(select_weights(&self.0.values(&input.ics)))
    }
}

impl AveragingMethod for IcAverage {
    fn name(&self) -> &str {
        self.1
    }
    fn weights(&self, input: &AveragingInput) -> Result<Vec<f64>> {
        Ok(ic_weights(&self.0.values(&input.ics)))
    }
}

impl AveragingMethod for MseOptimal {
    fn name(&self) -> &str {
        "omse_avg"
    }
    fn weights(&self, input: &AveragingInput) -> Result<Vec<f64>> {
        Ok(input.problem.weights.clone())
    }
}

/// Averaging methods by name.
pub struct AveragingRegistry {
    methods: BTreeMap<String, Box<dyn AveragingMethod>>,
}

impl Default for AveragingRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Select(Criterion::Claic, "claic_select")));
        r.register(Box::new(Select(Criterion::Clbic, "clbic_select")));
        r.register(Box::new(IcAverage(Criterion::Claic, "claic_avg")));
        r.register(Box::new(IcAverage(Criterion::Clbic, "clbic_avg")));
        r.register(Box::new(MseOptimal));
        r
    }
}

impl AveragingRegistry {
    pub fn empty() -> Self {
        Self { methods: BTreeMap::new() }
    }

    pub fn register(&mut self, m: Box<dyn AveragingMethod>) {
        self.methods.insert(m.name().to_string(), m);
    }

    pub fn get(&self, name: &str) -> Result<&dyn AveragingMethod> {
        self.methods
            .get(&name.to_ascii_lowercase())
            .map(|b| b.as_ref())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown averaging method '{name}' (known: {})",
                    self.names().join(", ")
                ))
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.methods.keys().map(|s| s.as_str()).collect()
    }

    /// Runs `name` and forms the averaged estimate.
    pub fn apply(&self, name: &str, input: &AveragingInput, data: &PanelDataset) -> Result<AveragingOutcome> {
        let method = self.get(name)?;
        let weights = method.weights(input)?;
        let theta = average_estimates(&input.candidates, &weights)?;
        let mut focus_value = Some(0.0);
        for (f, w) in input.candidates.fits.iter().zip(&weights) {
            match input.focus.value(&f.theta_hat.values, data, &f.spec, &f.context)? {
                Some(v) => focus_value = focus_value.map(|a| a + w * v),
                None => focus_value = None,
            }
        }
        Ok(AveragingOutcome {
            method: method.name().to_string(),
            weights,
            theta,
            focus_value,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(m: usize, rank: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(m, rank, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose()
    }

    #[test]
    fn ic_weight_properties() {
        assert_eq!(ic_weights(&[3.0, 3.0]), vec![0.5, 0.5]);
        let w = ic_weights(&[10.0, 12.0]);
        assert!((w[1] / w[0] - (-1.0f64).exp()).abs() < 1e-15);
        let shifted = ic_weights(&[1010.0, 1012.0]);
        assert!((w[0] - shifted[0]).abs() < 1e-15);
        let w = ic_weights(&[5.0, -3.0, 800.0, 2.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!(w[1] > w[3] && w[3] > w[0]);
        assert_eq!(select_weights(&[2.0, 1.0, 1.0]), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn identity_gives_equal_weights() {
        let w = solve_weights(&DMatrix::identity(4, 4));
        for v in w {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert_eq!(solve_weights(&DMatrix::from_element(1, 1, 3.0)), vec![1.0]);
    }

    #[test]
    fn zero_matrix_falls_back_to_equal_weights() {
        assert_eq!(solve_weights(&DMatrix::zeros(3, 3)), vec![1.0 / 3.0; 3]);
    }

    fn projected_gradient(f: &DMatrix<f64>) -> Vec<f64> {
        let m = f.nrows();
        let lmax = SymmetricEigen::new(f.clone()).eigenvalues.max();
        let mut w = DVector::from_element(m, 1.0 / m as f64);
        let eta = 0.5 / lmax;
        for _ in 0..200_000 {
            let g = f * &w * 2.0;
            let mean = g.sum() / m as f64;
            let pg = g.map(|v| v - mean);
            if pg.amax() < 1e-15 {
                break;
            }
            w -= pg * eta;
        }
        w.iter().copied().collect()
    }

    #[test]
    fn closed_form_matches_constrained_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let f = random_psd(5, 5, &mut rng) + DMatrix::identity(5, 5) * 0.2;
            let w = solve_weights(&f);
            let o = projected_gradient(&f);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in w.iter().zip(&o) {
                assert!((a - b).abs() < 1e-8, "{w:?} vs {o:?}");
            }
        }
    }

    #[test]
    fn weights_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_psd(4, 4, &mut rng) + DMatrix::identity(4, 4) * 0.1;
        let perm = [2, 0, 3, 1];
        let fp = DMatrix::from_fn(4, 4, |i, j| f[(perm[i], perm[j])]);
        let (w, wp) = (solve_weights(&f), solve_weights(&fp));
        for i in 0..4 {
            assert!((wp[i] - w[perm[i]]).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_embeds_inverse_block() {
        let h = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let l = lambda_matrix(&h, &[0, 2]).unwrap();
        let inv = sub_block(&h, &[0, 2], &[0, 2]).try_inverse().unwrap();
        assert_eq!(l.row(1).amax(), 0.0);
        assert_eq!(l.column(1).amax(), 0.0);
        assert!((l[(0, 2)] - inv[(0, 1)]).abs() < 1e-15);
        let full = lambda_matrix(&h, &[0, 1, 2]).unwrap();
        assert!((full * &h - DMatrix::identity(3, 3)).amax() < 1e-14);
    }

    // d = 2, p = 1 (gamma = coordinate 1), narrow and wide models, focus on
    // coordinate 0; every term of F written out in scalars
    #[test]
    fn two_model_toy_matches_scalar_oracle() {
        let (h00, h01, h11) = (2.0, 0.6, 1.5);
        let (j00, j01, j11) = (1.3, 0.4, 0.9);
        let delta = 0.8;
        let h = DMatrix::from_row_slice(2, 2, &[h00, h01, h01, h11]);
        let j = DMatrix::from_row_slice(2, 2, &[j00, j01, j01, j11]);
        let lam = vec![lambda_matrix(&h, &[0]).unwrap(), lambda_matrix(&h, &[0, 1]).unwrap()];
        let grads = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let (f, bias) = assemble_f(&grads, &lam, &h, &j, &[1], &DVector::from_element(1, delta));

        // narrow: Lambda = [[1/h00, 0], [0, 0]]
        let a_n = [1.0 / h00, 0.0];
        let b_n = a_n[0] * h01 + a_n[1] * h11 - 0.0;
        // wide: a = e_0' H^{-1}
        let det = h00 * h11 - h01 * h01;
        let a_w = [h11 / det, -h01 / det];
        let b_w = a_w[0] * h01 + a_w[1] * h11;
        let quad = |a: [f64; 2], c: [f64; 2]| a[0] * (j00 * c[0] + j01 * c[1]) + a[1] * (j01 * c[0] + j11 * c[1]);
        let want = [
            [b_n * b_n * delta * delta + quad(a_n, a_n), b_n * b_w * delta * delta + quad(a_n, a_w)],
            [b_w * b_n * delta * delta + quad(a_w, a_n), b_w * b_w * delta * delta + quad(a_w, a_w)],
        ];
        for p in 0..2 {
            for q in 0..2 {
                assert!((f[(p, q)] - want[p][q]).abs() < 1e-14, "{p}{q}");
            }
        }
        // the wide model is unbiased
        assert!(b_w.abs() < 1e-15 && bias[1][(0, 0)].abs() < 1e-15);
        assert!((bias[0][(0, 0)] - h01 / h00).abs() < 1e-15);
    }

    #[test]
    fn identical_models_give_constant_f() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_psd(3, 3, &mut rng) + DMatrix::identity(3, 3);
        let j = random_psd(3, 3, &mut rng) + DMatrix::identity(3, 3);
        let l = lambda_matrix(&h, &[0, 1]).unwrap();
        let grads = DMatrix::from_row_slice(1, 3, &[0.3, -1.0, 2.0]);
        let (f, _) = assemble_f(&grads, &[l.clone(), l.clone(), l], &h, &j, &[2], &DVector::zeros(1));
        let v = f[(0, 0)];
        assert!(f.iter().all(|x| (x - v).abs() < 1e-13));
    }

    #[test]
    fn f_is_psd_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let d = 5;
            let h = random_psd(d, d, &mut rng) + DMatrix::identity(d, d) * 0.3;
            let j = random_psd(d, d, &mut rng);
            let gamma = [3, 4];
            let frees: [&[usize]; 4] = [&[0, 1, 2], &[0, 1, 2, 3], &[0, 1, 2, 4], &[0, 1, 2, 3, 4]];
            let lam: Vec<_> = frees.iter().map(|fr| lambda_matrix(&h, fr).unwrap()).collect();
            let grads = DMatrix::from_fn(2, d, |_, _| rng.random_range(-1.0..1.0));
            let delta = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            let (f, _) = assemble_f(&grads, &lam, &h, &j, &gamma, &delta);
            let min = SymmetricEigen::new(f.clone()).eigenvalues.min();
            assert!(min >= -1e-8 * f.amax().max(1.0), "{min}");
            // summed foci add up
            let (f0, _) = assemble_f(&grads.rows(0, 1).into_owned(), &lam, &h, &j, &gamma, &delta);
            let (f1, _) = assemble_f(&grads.rows(1, 1).into_owned(), &lam, &h, &j, &gamma, &delta);
            assert!((&f - f0 - f1).amax() < 1e-12 * f.amax().max(1.0));
        }
    }

    #[test]
    fn focus_gradients_of_linear_kinds() {
        let data = PanelDataset::new(1, 2, 2, 1, 0, vec![0, 1], vec![0.1, -0.2, 0.3, 0.4], vec![]).unwrap();
        let spec = ModelSpec::new(1, 0, vec![], 0.5, vec![], vec![]).unwrap();
        let ctx = CmlContext::default();
        let th = [0.7];
        let c = Focus::Coordinate { index: 0 }.gradients(&th, &data, &spec, &ctx).unwrap();
        assert_eq!(c[(0, 0)], 1.0);
        assert!(Focus::Coordinate { index: 1 }.gradients(&th, &data, &spec, &ctx).is_err());
        assert!(Focus::CoordSet { indices: vec![] }.gradients(&th, &data, &spec, &ctx).is_err());
        let p = Focus::PairProbability { individual: 0, t: 0, t2: 1 };
        let v = p.value(&th, &data, &spec, &ctx).unwrap().unwrap();
        assert!(v > 0.0 && v < 1.0);
        let g = p.gradients(&th, &data, &spec, &ctx).unwrap();
        let h = 1e-4;
        let fd = (p.value(&[0.7 + h], &data, &spec, &ctx).unwrap().unwrap() - p.value(&[0.7 - h], &data, &spec, &ctx).unwrap().unwrap()) / (2.0 * h);
        assert!((g[(0, 0)] - fd).abs() < 1e-6);
    }
}
