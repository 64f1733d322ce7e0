//! Likelihood-ratio-type tests and information criteria for comparing a fit
//! with a nested, more restricted fit of the same model family.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cml::{score, ScoreMethod};
use crate::error::{Error, Result};
use crate::estimation::{estimate_h1, estimate_h_hessian, estimate_j, godambe, sub_block, Fit, GodambeEstimates, SensitivityEstimator};
use crate::gauss::{chisq_sf, weighted_chisq_sf, MixtureSpec};
use crate::model::PanelDataset;

/// Slack below zero tolerated in ratio statistics before a warning.
const NEGATIVE_SLACK: f64 = 1e-10;

/// Outcome of one test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: String,
    pub statistic: f64,
    /// Degrees of freedom of the chi-square reference; fractional for cCLR2.
    pub dof: f64,
    pub p_value: f64,
    /// Unadjusted composite likelihood ratio.
    pub clr: f64,
    /// Eigenvalues of `(H^gg)^{-1} G^gg`, descending.
    pub lambdas: Vec<f64>,
    pub omega: Option<f64>,
    pub kappa: Option<f64>,
    pub nu: Option<f64>,
    /// Multiplier solves at the restricted and unrestricted fit, for EL.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub el_states: Vec<ELState>,
}

impl TestResult {
    fn new(method: &str, statistic: f64, dof: f64, clr: f64) -> Self {
        Self {
            method: method.to_string(),
            statistic,
            dof,
            p_value: p_value(statistic, dof),
            clr,
            lambdas: Vec::new(),
            omega: None,
            kappa: None,
            nu: None,
            el_states: Vec::new(),
        }
    }

    /// Test of an empty restriction.
    fn trivial(method: &str) -> Self {
        Self::new(method, 0.0, 0.0, 0.0)
    }

    pub fn rejects(&self, level: f64) -> bool {
        self.p_value < level
    }
}

/// Upper chi-square tail, clamped to `[0, 1]`; 1 for `dof = 0`.
pub fn p_value(statistic: f64, dof: f64) -> f64 {
    if dof <= 0.0 || statistic.is_nan() {
        return 1.0;
    }
    if statistic <= 0.0 {
        return 1.0;
    }
    chisq_sf(statistic, dof).clamp(0.0, 1.0)
}

/// Coordinates pinned in `restricted` but free in `unrestricted`, after
/// checking that the two fits are comparable.
pub fn tested_coordinates(unrestricted: &Fit, restricted: &Fit) -> Result<Vec<usize>> {
    if !unrestricted.spec.same_family(&restricted.spec) {
        return Err(Error::Mismatch("fits use different model families".into()));
    }
    if unrestricted.context != restricted.context {
        return Err(Error::Mismatch("fits use different approximation contexts".into()));
    }
    if unrestricted.n_individuals != restricted.n_individuals || unrestricted.data_fingerprint != restricted.data_fingerprint {
        return Err(Error::Mismatch("fits use different datasets".into()));
    }
    let (ru, rr) = (&unrestricted.restriction, &restricted.restriction);
    for (k, i) in ru.indices.iter().enumerate() {
        match rr.indices.iter().position(|j| j == i) {
            Some(m) if rr.values[m] == ru.values[k] => {}
            _ => {
                return Err(Error::Mismatch(format!(
                    "coordinate {i} is pinned in the larger model but not identically in the smaller one"
                )))
            }
        }
    }
    let mut tested: Vec<usize> = rr.indices.iter().copied().filter(|i| !ru.indices.contains(i)).collect();
    tested.sort_unstable();
    Ok(tested)
}

/// `2 [lcml(unrestricted) - lcml(restricted)]`, clipped at zero.
pub fn clr(unrestricted: &Fit, restricted: &Fit) -> Result<f64> {
    tested_coordinates(unrestricted, restricted)?;
    let raw = 2.0 * (unrestricted.lcml_value - restricted.lcml_value);
    if !raw.is_finite() {
        return Err(Error::NonFinite("composite likelihood ratio".into()));
    }
    if raw < -NEGATIVE_SLACK {
        warn!("composite likelihood ratio {raw:e} is negative; clipped to 0");
    }
    Ok(raw.max(0.0))
}

/// The ratio referred to chi-square with `p` degrees of freedom, without
/// adjustment.
pub fn naive_clr(clr: f64, p: usize) -> TestResult {
    TestResult::new("clr", clr, p as f64, clr)
}

/// Tail of the weighted chi-square mixture that is the asymptotic law of the
/// unadjusted ratio.
pub fn clr_mixture_p_value(clr: f64, lambdas: &[f64], draws: usize, seed: u64) -> Result<f64> {
    weighted_chisq_sf(clr, &MixtureSpec::new(lambdas.to_vec(), draws, seed)?)
}

fn check_psd_block(h: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let eig = SymmetricEigen::new((h + h.transpose()) * 0.5);
    let min = eig.eigenvalues.min();
    if !(min > 0.0) {
        return Err(Error::Singular(format!(
            "tested block of the inverse sensitivity (minimum eigenvalue {min:e})"
        )));
    }
    Ok(eig)
}

/// Eigenvalues of `(H^gg)^{-1} G^gg` through the symmetric form
/// `(H^gg)^{-1/2} G^gg (H^gg)^{-1/2}`, descending.
pub fn eigen_lambdas(g: &GodambeEstimates) -> Result<Vec<f64>> {
    if g.gamma_indices.is_empty() {
        return Ok(Vec::new());
    }
    let hgg = g.h_gamma_gamma()?;
    let ggg = g.g_gamma_gamma()?;
    let eig = check_psd_block(&hgg)?;
    let inv_sqrt = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()))
        * eig.eigenvectors.transpose();
    let m = &inv_sqrt * ggg * &inv_sqrt;
    let m = (&m + m.transpose()) * 0.5;
    let mut lambdas: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    if lambdas.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("adjustment eigenvalues".into()));
    }
    lambdas.sort_by(|a, b| b.total_cmp(a));
    Ok(lambdas)
}

fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("no eigenvalues".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
        return Err(Error::InvalidArgument(format!("eigenvalue {l:e} is not positive")));
    }
    Ok(())
}

/// First-moment adjustment: `CLR / mean(lambda)` against chi-square(p).
pub fn cclr1(clr: f64, lambdas: &[f64]) -> Result<TestResult> {
    check_lambdas(lambdas)?;
    let p = lambdas.len() as f64;
    let omega = lambdas.iter().sum::<f64>() / p;
    let mut r = TestResult::new("cclr1", clr / omega, p, clr);
    r.lambdas = lambdas.to_vec();
    r.omega = Some(omega);
    Ok(r)
}

/// Two-moment adjustment: `CLR / kappa` against chi-square(nu).
pub fn cclr2(clr: f64, lambdas: &[f64]) -> Result<TestResult> {
    check_lambdas(lambdas)?;
    let s1: f64 = lambdas.iter().sum();
    let s2: f64 = lambdas.iter().map(|l| l * l).sum();
    let (kappa, nu) = (s2 / s1, s1 * s1 / s2);
    let mut r = TestResult::new("cclr2", clr / kappa, nu, clr);
    r.lambdas = lambdas.to_vec();
    r.kappa = Some(kappa);
    r.nu = Some(nu);
    Ok(r)
}

/// Weighting of the denominator quadratic form of cCLR3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cclr3Form {
    /// `s' H^gg [G^gg]^{-1} H^gg s / s' (H^gg)^{-1} s`.
    #[default]
    Standard,
    /// `s' H^gg [G^gg]^{-1} H^gg s / s' H^gg s`, which reduces to
    /// `CLR / lambda_1` for a single tested coordinate.
    SensitivityBoth,
}

fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if let Some(c) = a.clone().cholesky() {
        return Ok(c.solve(b));
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Singular(what.to_string()))
}

/// Reparametrization-invariant adjustment. `s_gamma` is the tested block of
/// the score at the restricted fit; its scale cancels.
pub fn cclr3(clr: f64, s_gamma: &[f64], g: &GodambeEstimates, form: Cclr3Form) -> Result<TestResult> {
    let p = g.gamma_indices.len();
    if s_gamma.len() != p {
        return Err(Error::DimensionMismatch {
            what: "tested score block".into(),
            expected: p,
            got: s_gamma.len(),
        });
    }
    let hgg = g.h_gamma_gamma()?;
    let ggg = g.g_gamma_gamma()?;
    check_psd_block(&hgg)?;
    let s = DVector::from_column_slice(s_gamma);
    let u = &hgg * &s;
    let num = u.dot(&spd_solve(&ggg, &u, "tested block of the inverse Godambe matrix")?);
    let den = match form {
        Cclr3Form::Standard => s.dot(&spd_solve(&hgg, &s, "tested block of the inverse sensitivity")?),
        Cclr3Form::SensitivityBoth => s.dot(&u),
    };
    if !(den.abs() > f64::MIN_POSITIVE) || !num.is_finite() || !den.is_finite() {
        return Err(Error::Singular(
            "cCLR3 denominator: the tested score at the restricted fit is numerically zero".into(),
        ));
    }
    let name = match form {
        Cclr3Form::Standard => "cclr3",
        Cclr3Form::SensitivityBoth => "cclr3_hh",
    };
    let mut r = TestResult::new(name, num / den * clr, p as f64, clr);
    r.lambdas = eigen_lambdas(g)?;
    Ok(r)
}

/// Lagrange multiplier of the empirical likelihood at one parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ELState {
    pub psi: Vec<f64>,
    /// `sum_n log(1 + psi' s_n)`.
    pub el_value: f64,
    /// Infinity norm of `(1/N) sum_n s_n / (1 + psi' s_n)`.
    pub residual: f64,
    pub iterations: usize,
}

pub const EL_TOLERANCE: f64 = 1e-8;
const EL_MAX_ITER: usize = 200;

struct LogStar {
    eps: f64,
}

impl LogStar {
    // log below eps replaced by its second-order expansion at eps
    fn value(&self, z: f64) -> f64 {
        if z >= self.eps {
            z.ln()
        } else {
            let r = z / self.eps;
            self.eps.ln() - 1.5 + 2.0 * r - 0.5 * r * r
        }
    }
    fn d1(&self, z: f64) -> f64 {
        if z >= self.eps {
            1.0 / z
        } else {
            (2.0 - z / self.eps) / self.eps
        }
    }
    fn d2(&self, z: f64) -> f64 {
        if z >= self.eps {
            -1.0 / (z * z)
        } else {
            -1.0 / (self.eps * self.eps)
        }
    }
}

fn el_residual(scores: &DMatrix<f64>, psi: &DVector<f64>) -> f64 {
    let (n, d) = scores.shape();
    let mut acc = DVector::zeros(d);
    for r in scores.row_iter() {
        let z = 1.0 + (r * psi)[0];
        if !(z > 0.0) {
            return f64::INFINITY;
        }
        acc += r.transpose() / z;
    }
    acc.amax() / n as f64
}

/// Solves for the multiplier by Newton ascent of `sum_n log*(1 + psi' s_n)`,
/// where `log*` continues the logarithm quadratically below `1/N`. Rows of
/// `scores` are the per-individual scores.
pub fn solve_psi(scores: &DMatrix<f64>) -> Result<ELState> {
    let (n, d) = scores.shape();
    if n == 0 {
        return Err(Error::InvalidArgument("no scores".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("individual scores".into()));
    }
    let ls = LogStar { eps: 1.0 / n as f64 };
    let objective = |psi: &DVector<f64>| -> f64 { (scores * psi).iter().map(|v| ls.value(1.0 + v)).sum() };
    let mut psi = DVector::zeros(d);
    let mut f = objective(&psi);
    let mut residual = el_residual(scores, &psi);
    let mut iterations = 0;
    while iterations < EL_MAX_ITER && residual > EL_TOLERANCE * 1e-3 {
        iterations += 1;
        let z = scores * &psi;
        let mut grad = DVector::zeros(d);
        let mut neg_hess = DMatrix::zeros(d, d);
        for (i, r) in scores.row_iter().enumerate() {
            let zi = 1.0 + z[i];
            let rt = r.transpose();
            grad.axpy(ls.d1(zi), &rt, 1.0);
            neg_hess.syger(-ls.d2(zi), &rt, &rt, 1.0);
        }
        neg_hess.fill_upper_triangle_with_lower_triangle();
        let mut ridge = 0.0;
        let scale = neg_hess.diagonal().amax().max(f64::MIN_POSITIVE);
        let step = loop {
            let a = &neg_hess + DMatrix::identity(d, d) * ridge;
            if let Some(c) = a.cholesky() {
                break c.solve(&grad);
            }
            ridge = if ridge == 0.0 { scale * 1e-12 } else { ridge * 10.0 };
            if ridge > scale * 1e6 {
                return Err(Error::ElNotConverged { residual, iterations });
            }
        };
        let slope = grad.dot(&step);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &psi + &step * t;
            let fc = objective(&cand);
            let rc = el_residual(scores, &cand);
            // near the optimum the objective is flat to rounding; the residual decides
            if fc >= f + 1e-4 * t * slope || (fc >= f - 1e-12 * f.abs().max(1.0) && rc < residual) {
                psi = cand;
                f = fc;
                residual = rc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    residual = el_residual(scores, &psi);
    // implied weights 1/(N z_n) sum to one at a genuine root; a multiplier
    // running off to infinity (zero outside the convex hull of the scores)
    // also drives the residual to zero
    let weight_sum = (scores * &psi).iter().map(|v| 1.0 / (1.0 + v)).sum::<f64>() / n as f64;
    if !(residual <= EL_TOLERANCE) || !((weight_sum - 1.0).abs() <= 1e-6) {
        return Err(Error::ElNotConverged {
            residual: residual.max((weight_sum - 1.0).abs()),
            iterations,
        });
    }
    let el_value = (scores * &psi).iter().map(|v| (1.0 + v).ln()).sum();
    Ok(ELState {
        psi: psi.iter().copied().collect(),
        el_value,
        residual,
        iterations,
    })
}

/// Empirical likelihood ratio `2 [el(restricted) - el(unrestricted)]`
/// against chi-square(p). Both score matrices carry the coordinates free in
/// the unrestricted fit.
pub fn el_test(scores_unrestricted: &DMatrix<f64>, scores_restricted: &DMatrix<f64>, p: usize) -> Result<TestResult> {
    if scores_unrestricted.shape() != scores_restricted.shape() {
        return Err(Error::DimensionMismatch {
            what: "score columns".into(),
            expected: scores_unrestricted.ncols(),
            got: scores_restricted.ncols(),
        });
    }
    if p == 0 {
        return Ok(TestResult::trivial("el"));
    }
    let su = solve_psi(scores_unrestricted)?;
    let sr = solve_psi(scores_restricted)?;
    let raw = 2.0 * (sr.el_value - su.el_value);
    if raw < -NEGATIVE_SLACK {
        warn!("empirical likelihood ratio {raw:e} is negative; clipped to 0");
    }
    let mut r = TestResult::new("el", raw.max(0.0), p as f64, f64::NAN);
    r.el_states = vec![sr, su];
    Ok(r)
}

/// Composite likelihood information criteria of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ICResult {
    pub claic: f64,
    pub clbic: f64,
    /// `tr[J H^{-1}]` over the penalty coordinates.
    pub penalty_trace: f64,
    pub lcml_value: f64,
    pub n: usize,
}

/// Coordinates over which the criterion penalty is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyScope {
    /// Every coordinate of the parameter vector, pinned ones included, so
    /// nested models are penalized over the same coordinates.
    #[default]
    AllCoordinates,
    /// Only the coordinates the fit estimated.
    FreeCoordinates,
}

impl PenaltyScope {
    pub fn indices(&self, fit: &Fit) -> Vec<usize> {
        match self {
            PenaltyScope::AllCoordinates => (0..fit.theta_hat.len()).collect(),
            PenaltyScope::FreeCoordinates => fit.free_indices(),
        }
    }
}

/// Criteria of `fit` with `g` estimated over the fit's free coordinates or
/// over all of them; the penalty covers whichever set `g` spans.
pub fn information_criteria(fit: &Fit, g: &GodambeEstimates) -> Result<ICResult> {
    let free = fit.free_indices().len();
    if g.dim() != free && g.dim() != fit.theta_hat.len() {
        return Err(Error::DimensionMismatch {
            what: "Godambe estimates over free or all coordinates".into(),
            expected: free,
            got: g.dim(),
        });
    }
    let trace = if g.dim() == 0 {
        0.0
    } else {
        let x = g
            .h
            .clone()
            .lu()
            .solve(&g.j)
            .ok_or_else(|| Error::Singular("sensitivity matrix".into()))?;
        x.trace()
    };
    if !trace.is_finite() {
        return Err(Error::NonFinite("information criterion penalty".into()));
    }
    let n = fit.n_individuals;
    Ok(ICResult {
        claic: -2.0 * fit.lcml_value + 2.0 * trace,
        clbic: -2.0 * fit.lcml_value + (n as f64).ln() * trace,
        penalty_trace: trace,
        lcml_value: fit.lcml_value,
        n,
    })
}

/// Settings shared by all selection methods.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparisonOptions {
    pub sensitivity: SensitivityEstimator,
    pub score_method: ScoreMethod,
    pub penalty: PenaltyScope,
}

/// Everything the selection methods need about a nested pair of fits.
#[derive(Debug, Clone)]
pub struct NestedComparison {
    /// Coordinates pinned only in the restricted fit.
    pub tested: Vec<usize>,
    /// Coordinates free in the unrestricted fit.
    pub free: Vec<usize>,
    pub clr: f64,
    /// `N x |free|` individual scores at each fit.
    pub scores_unrestricted: DMatrix<f64>,
    pub scores_restricted: DMatrix<f64>,
    /// Tested block of the total score at the restricted fit.
    pub score_gamma: Vec<f64>,
    /// Godambe estimates at the restricted fit over `free`, with the tested
    /// coordinates as gamma.
    pub godambe_restricted: GodambeEstimates,
    pub ic_unrestricted: ICResult,
    pub ic_restricted: ICResult,
}

fn columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

impl NestedComparison {
    pub fn new(data: &PanelDataset, unrestricted: &Fit, restricted: &Fit, opts: &ComparisonOptions) -> Result<Self> {
        let tested = tested_coordinates(unrestricted, restricted)?;
        if unrestricted.data_fingerprint != data.fingerprint() {
            return Err(Error::Mismatch("dataset differs from the one the fits used".into()));
        }
        let clr = clr(unrestricted, restricted)?;
        let free = unrestricted.free_indices();
        let (pen_u, pen_r) = (opts.penalty.indices(unrestricted), opts.penalty.indices(restricted));

        let at = |fit: &Fit| -> Result<(crate::cml::ScoreSet, DMatrix<f64>, DMatrix<f64>)> {
            let s = score(data, &fit.theta_hat.values, &fit.spec, &fit.context, opts.score_method)?;
            let h = match opts.sensitivity {
                SensitivityEstimator::PairwiseOuter => estimate_h1(&s),
                SensitivityEstimator::Hessian => estimate_h_hessian(data, fit)?,
            };
            let j = estimate_j(&s);
            Ok((s, h, j))
        };
        let (su, hu, ju) = at(unrestricted)?;
        let (sr, hr, jr) = at(restricted)?;

        let gu = godambe(sub_block(&hu, &pen_u, &pen_u), sub_block(&ju, &pen_u, &pen_u), opts.sensitivity, &[])?;
        let gamma_pos: Vec<usize> = tested.iter().map(|t| free.iter().position(|f| f == t).unwrap()).collect();
        let g_r = godambe(sub_block(&hr, &free, &free), sub_block(&jr, &free, &free), opts.sensitivity, &gamma_pos)?;
        let g_r_own = godambe(sub_block(&hr, &pen_r, &pen_r), sub_block(&jr, &pen_r, &pen_r), opts.sensitivity, &[])?;

        Ok(Self {
            clr,
            scores_unrestricted: columns(&su.per_individual, &free),
            scores_restricted: columns(&sr.per_individual, &free),
            score_gamma: tested.iter().map(|&t| sr.total[t]).collect(),
            godambe_restricted: g_r,
            ic_unrestricted: information_criteria(unrestricted, &gu)?,
            ic_restricted: information_criteria(restricted, &g_r_own)?,
            tested,
            free,
        })
    }

    pub fn p(&self) -> usize {
        self.tested.len()
    }

    pub fn lambdas(&self) -> Result<Vec<f64>> {
        eigen_lambdas(&self.godambe_restricted)
    }
}

/// Decision of a selection method between the two nested models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    Test(TestResult),
    Criterion {
        method: String,
        larger: ICResult,
        smaller: ICResult,
    },
}

impl Verdict {
    /// True when the larger (unrestricted) model is retained: the test
    /// rejects at `level`, or the criterion is strictly smaller for it.
    pub fn prefers_larger(&self, level: f64) -> bool {
        match self {
            Verdict::Test(t) => t.rejects(level),
            Verdict::Criterion { method, larger, smaller } => {
                if method == "clbic" {
                    larger.clbic < smaller.clbic
                } else {
                    larger.claic < smaller.claic
                }
            }
        }
    }
}

/// A way of choosing between a model and a nested restriction of it.
pub trait SelectionMethod: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, cmp: &NestedComparison) -> Result<Verdict>;
}

struct Clr;
struct Cclr1;
struct Cclr2;
struct Cclr3(Cclr3Form);
struct El;
struct Ic(&'static str);

impl SelectionMethod for Clr {
    fn name(&self) -> &str {
        "clr"
    }
    fn evaluate(&self, cmp: &NestedComparison) -> Result<Verdict> {
        Ok(Verdict::Test(naive_clr(cmp.clr, cmp.p())))
    }
}

impl SelectionMethod for Cclr1 {
    fn name(&self) -> &str {
        "cclr1"
    }
    fn evaluate(&self, cmp: &NestedComparison) -> Result<Verdict> {
        if cmp.p() == 0 {
            return Ok(Verdict::Test(TestResult::trivial(self.name())));
        }
        Ok(Verdict::Test(cclr1(cmp.clr, &cmp.lambdas()?)?))
    }
}

impl SelectionMethod for Cclr2 {
    fn name(&self) -> &str {
        "cclr2"
    }
    fn evaluate(&self, cmp: &NestedComparison) -> Result<Verdict> {
        if cmp.p() == 0 {
            return Ok(Verdict::Test(TestResult::trivial(self.name())));
        }
        Ok(Verdict::Test(cclr2(cmp.clr, &cmp.lambdas()?)?))
    }
}

impl SelectionMethod for Cclr3 {
    fn name(&self) -> &str {
        match self.0 {
            Cclr3Form::Standard => "cclr3",
            Cclr3Form::SensitivityBoth => "cclr3_hh",
        }
    }
    fn evaluate(&self, cmp: &NestedComparison) -> Result<Verdict> {
        if cmp.p() == 0 {
            return Ok(Verdict::Test(TestResult::trivial(self.name())));
        }
        Ok(Verdict::Test(cclr3(cmp.clr, &cmp.score_gamma, &cmp.godambe_restricted, self.0)?))
    }
}

impl SelectionMethod for El {
    fn name(&self) -> &str {
        "el"
    }
    fn evaluate(&self, cmp: &NestedComparison) -> Result<Verdict> {
        let mut r = el_test(&cmp.scores_unrestricted, &cmp.scores_restricted, cmp.p())?;
        r.clr = cmp.clr;
        Ok(Verdict::Test(r))
    }
}

impl SelectionMethod for Ic {
    fn name(&self) -> &str {
        self.0
    }
    fn evaluate(&self, cmp: &NestedComparison) -> Result<Verdict> {
        Ok(Verdict::Criterion {
            method: self.0.to_string(),
            larger: cmp.ic_unrestricted.clone(),
            smaller: cmp.ic_restricted.clone(),
        })
    }
}

/// Selection methods by name.
pub struct SelectionRegistry {
    methods: BTreeMap<String, Box<dyn SelectionMethod>>,
}

impl Default for SelectionRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Clr));
        r.register(Box::new(Cclr1));
        r.register(Box::new(Cclr2));
        r.register(Box::new(Cclr3(Cclr3Form::Standard)));
        r.register(Box::new(Cclr3(Cclr3Form::SensitivityBoth)));
        r.register(Box::new(El));
        r.register(Box::new(Ic("claic")));
        r.register(Box::new(Ic("clbic")));
        r
    }
}

impl SelectionRegistry {
    pub fn empty() -> Self {
        Self { methods: BTreeMap::new() }
    }

    /// Adds or replaces a method under its own name.
    pub fn register(&mut self, m: Box<dyn SelectionMethod>) {
        self.methods.insert(m.name().to_string(), m);
    }

    pub fn get(&self, name: &str) -> Result<&dyn SelectionMethod> {
        self.methods
            .get(&name.to_ascii_lowercase())
            .map(|b| b.as_ref())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown selection method '{name}' (known: {})",
                    self.names().join(", ")
                ))
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.methods.keys().map(|s| s.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.5
    }

    fn gest(h: DMatrix<f64>, j: DMatrix<f64>, gamma: &[usize]) -> GodambeEstimates {
        godambe(h, j, SensitivityEstimator::PairwiseOuter, gamma).unwrap()
    }

    #[test]
    fn scalar_lambda_and_equal_adjustments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let h = random_spd(4, &mut rng);
            let j = random_spd(4, &mut rng);
            let g = gest(h, j, &[2]);
            let l = eigen_lambdas(&g).unwrap();
            let want = g.g_gamma_gamma().unwrap()[(0, 0)] / g.h_gamma_gamma().unwrap()[(0, 0)];
            assert!((l[0] - want).abs() < 1e-12 * want);
            let clr = rng.random_range(0.1..8.0);
            let s = [rng.random_range(-3.0..3.0)];
            let a = cclr1(clr, &l).unwrap().statistic;
            let b = cclr2(clr, &l).unwrap().statistic;
            let c = cclr3(clr, &s, &g, Cclr3Form::SensitivityBoth).unwrap().statistic;
            assert!((a - clr / l[0]).abs() < 1e-10 * a);
            assert!((a - b).abs() < 1e-10 * a);
            assert!((a - c).abs() < 1e-10 * a);
            // the standard weighting carries an extra (H^gg)^2
            let hgg = g.h_gamma_gamma().unwrap()[(0, 0)];
            let standard = cclr3(clr, &s, &g, Cclr3Form::Standard).unwrap().statistic;
            assert!((standard - a * hgg * hgg).abs() < 1e-9 * standard);
        }
    }

    #[test]
    fn equal_sensitivity_and_variability_give_unit_lambdas() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_spd(5, &mut rng);
        let g = gest(h.clone(), h, &[1, 3, 4]);
        for l in eigen_lambdas(&g).unwrap() {
            assert!((l - 1.0).abs() < 1e-10);
        }
        let r1 = cclr1(4.2, &[1.0, 1.0, 1.0]).unwrap();
        let r2 = cclr2(4.2, &[1.0, 1.0, 1.0]).unwrap();
        let naive = naive_clr(4.2, 3);
        assert_eq!(r1.statistic, naive.statistic);
        assert!((r2.p_value - naive.p_value).abs() < 1e-14);
    }

    #[test]
    fn lambdas_match_nonsymmetric_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let h = random_spd(3, &mut rng);
            let j = random_spd(3, &mut rng);
            let g = gest(h, j, &[0, 1, 2]);
            let prod = g.h_gamma_gamma().unwrap().try_inverse().unwrap() * g.g_gamma_gamma().unwrap();
            let mut oracle: Vec<f64> = prod.schur().eigenvalues().unwrap().iter().copied().collect();
            oracle.sort_by(|a, b| b.total_cmp(a));
            let got = eigen_lambdas(&g).unwrap();
            for (a, b) in got.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10 * b.abs().max(1.0), "{got:?} vs {oracle:?}");
            }
        }
    }

    #[test]
    fn two_moment_constants_by_hand() {
        let r1 = cclr1(6.0, &[3.0, 1.0]).unwrap();
        let r2 = cclr2(6.0, &[3.0, 1.0]).unwrap();
        assert_eq!(r1.omega, Some(2.0));
        assert_eq!(r1.statistic, 3.0);
        assert!((r2.kappa.unwrap() - 2.5).abs() < 1e-15);
        assert!((r2.nu.unwrap() - 1.6).abs() < 1e-15);
        assert!((r2.statistic - 2.4).abs() < 1e-15);
        assert!((r1.p_value - chisq_sf(3.0, 2.0)).abs() < 1e-15);
        assert!((r2.p_value - chisq_sf(2.4, 1.6)).abs() < 1e-15);
        // chi-square(2) tail is exp(-x/2)
        assert!((r1.p_value - (-1.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn bad_lambdas_rejected() {
        assert!(cclr1(1.0, &[]).is_err());
        assert!(cclr1(1.0, &[1.0, 0.0]).is_err());
        assert!(cclr2(1.0, &[-1.0]).is_err());
    }

    #[test]
    fn identity_blocks_leave_clr_unchanged() {
        let i = DMatrix::identity(3, 3);
        let g = gest(i.clone(), i, &[0, 2]);
        for form in [Cclr3Form::Standard, Cclr3Form::SensitivityBoth] {
            let r = cclr3(5.5, &[0.3, -1.2], &g, form).unwrap();
            assert!((r.statistic - 5.5).abs() < 1e-12);
        }
        assert!(cclr3(5.5, &[0.0, 0.0], &g, Cclr3Form::Standard).is_err());
    }

    #[test]
    fn p_values_stay_in_range() {
        for x in [-1e300, -3.0, 0.0, 1e-300, 0.5, 40.0, 1e300, f64::INFINITY] {
            for dof in [0.0, 0.3, 1.0, 7.5] {
                let p = p_value(x, dof);
                assert!((0.0..=1.0).contains(&p), "{x} {dof} {p}");
            }
        }
    }

    fn normal_scores(n: usize, d: usize, shift: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, c| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * (1.0 + c as f64) + shift
        })
    }

    #[test]
    fn zero_mean_scores_give_zero_multiplier() {
        let mut s = normal_scores(50, 3, 0.0, 2);
        let mean = s.row_sum() / 50.0;
        for mut r in s.row_iter_mut() {
            r -= &mean;
        }
        let st = solve_psi(&s).unwrap();
        assert!(st.psi.iter().all(|v| v.abs() < 1e-14));
        assert_eq!(st.iterations, 0);
        assert!(st.el_value.abs() < 1e-14);
    }

    // dense grid over a box, then compass search to machine precision
    fn psi_grid_oracle(s: &DMatrix<f64>) -> [f64; 2] {
        let obj = |a: f64, b: f64| -> f64 {
            let mut t = 0.0;
            for r in s.row_iter() {
                let z = 1.0 + a * r[0] + b * r[1];
                if z <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                t += z.ln();
            }
            t
        };
        let (mut best, mut bv) = ([0.0, 0.0], obj(0.0, 0.0));
        let m = 200;
        for i in 0..=m {
            for k in 0..=m {
                let a = -1.0 + 2.0 * i as f64 / m as f64;
                let b = -1.0 + 2.0 * k as f64 / m as f64;
                let v = obj(a, b);
                if v > bv {
                    bv = v;
                    best = [a, b];
                }
            }
        }
        let mut h = 0.01;
        while h > 1e-13 {
            let mut improved = false;
            for (da, db) in [(h, 0.0), (-h, 0.0), (0.0, h), (0.0, -h), (h, h), (-h, -h), (h, -h), (-h, h)] {
                let v = obj(best[0] + da, best[1] + db);
                if v > bv {
                    bv = v;
                    best = [best[0] + da, best[1] + db];
                    improved = true;
                }
            }
            if !improved {
                h *= 0.5;
            }
        }
        best
    }

    #[test]
    fn multiplier_matches_grid_oracle() {
        for seed in 0..3 {
            let s = normal_scores(60, 2, 0.35, 40 + seed);
            let st = solve_psi(&s).unwrap();
            let o = psi_grid_oracle(&s);
            assert!(st.residual <= EL_TOLERANCE);
            for k in 0..2 {
                assert!((st.psi[k] - o[k]).abs() < 1e-6, "{:?} vs {o:?}", st.psi);
            }
        }
    }

    #[test]
    fn multiplier_fails_when_zero_outside_hull() {
        let line = DMatrix::from_fn(30, 2, |r, c| 1.0 + (r + c) as f64 * 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let positive = DMatrix::from_fn(40, 3, |_, _| rng.random_range(0.1..2.0));
        for s in [line, positive] {
            match solve_psi(&s) {
                Err(Error::ElNotConverged { residual, .. }) => assert!(residual > EL_TOLERANCE),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn el_statistic_is_twice_the_difference() {
        let u = {
            let mut s = normal_scores(80, 2, 0.0, 9);
            let mean = s.row_sum() / 80.0;
            for mut r in s.row_iter_mut() {
                r -= &mean;
            }
            s
        };
        let r = normal_scores(80, 2, 0.2, 10);
        let t = el_test(&u, &r, 1).unwrap();
        let want = 2.0 * solve_psi(&r).unwrap().el_value;
        assert!((t.statistic - want).abs() < 1e-12);
        assert!(t.statistic > 0.0);
        assert_eq!(t.dof, 1.0);
        let t0 = el_test(&u, &u, 0).unwrap();
        assert_eq!((t0.statistic, t0.p_value), (0.0, 1.0));
    }

    #[test]
    fn registry_lookup() {
        let reg = SelectionRegistry::default();
        for n in ["clr", "cclr1", "cclr2", "cclr3", "cclr3_hh", "el", "claic", "clbic"] {
            assert_eq!(reg.get(n).unwrap().name(), n);
        }
        assert_eq!(reg.get("CLAIC").unwrap().name(), "claic");
        assert!(reg.get("wald").is_err());
    }

    #[test]
    fn criterion_verdict_uses_its_own_column() {
        let ic = |claic: f64, clbic: f64| ICResult {
            claic,
            clbic,
            penalty_trace: 1.0,
            lcml_value: 0.0,
            n: 10,
        };
        let v = |m: &str| Verdict::Criterion {
            method: m.into(),
            larger: ic(1.0, 5.0),
            smaller: ic(2.0, 4.0),
        };
        assert!(v("claic").prefers_larger(0.05));
        assert!(!v("clbic").prefers_larger(0.05));
    }
}
