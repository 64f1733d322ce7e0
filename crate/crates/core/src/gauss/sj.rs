//! Solow-Joe approximation of the multivariate normal orthant probability.
//!
//! For an ordering of the coordinates the probability `P(u <= b)` is written
//! as `Phi2(b1, b2; r12)` times a product of conditional probabilities
//! `P(u_k <= b_k | u_j <= b_j, j < k)`. Each conditional factor is replaced by
//! the linear projection of the indicator `I_k` on the indicators of the
//! preceding coordinates, evaluated at `I_j = 1`:
//!
//! `p_k = Phi(b_k) + q_k' Q_k^{-1} (1 - Phi(b_{<k}))`
//!
//! where `Q_k` and `q_k` hold indicator covariances. With `Q = L L'` the
//! Cholesky factor of the full indicator covariance, `q_k' Q_k^{-1} r` is the
//! dot product of row `k` of `L` with `L^{-1} r`, so one factorization and
//! one triangular solve serve every step.
//!
//! The log probability is differentiated in reverse mode with respect to the
//! limits `b` and the correlations `R`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::normal::{bvn_cdf, bvn_cdf_partials, std_normal_cdf, std_normal_pdf};
use crate::error::{Error, Result};

pub const DEFAULT_CLAMP_EPSILON: f64 = 1e-10;
const Q_JITTER: f64 = 1e-12;
/// Width of the band below `1 - eps` over which conditional factors bend
/// smoothly towards the upper bound.
const SATURATION_BAND: f64 = 1e-4;

/// Map a raw conditional factor into `[eps, 1 - eps)`: values below `eps`
/// are clamped, values above `1 - eps - band` saturate exponentially so the
/// log-likelihood stays continuously differentiable. Returns the value and
/// its derivative.
#[inline]
fn bound_factor(p: f64, eps: f64) -> (f64, f64) {
    let top = 1.0 - eps;
    let band = SATURATION_BAND.min(0.5 * (top - eps));
    let knee = top - band;
    if p < eps {
        (eps, 0.0)
    } else if p <= knee {
        (p, 1.0)
    } else {
        let e = (-(p - knee) / band).exp();
        (knee + band * (1.0 - e), e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationMode {
    /// Orderings drawn at random once per call site and then held fixed.
    FixedRandom,
    /// Average over every ordering of the coordinates.
    All,
    /// Explicit orderings.
    Given(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SjConfig {
    pub n_permutations: usize,
    pub permutation_mode: PermutationMode,
    pub clamp_epsilon: f64,
}

impl Default for SjConfig {
    fn default() -> Self {
        Self {
            n_permutations: 1,
            permutation_mode: PermutationMode::FixedRandom,
            clamp_epsilon: DEFAULT_CLAMP_EPSILON,
        }
    }
}

impl SjConfig {
    pub fn all_permutations() -> Self {
        Self {
            permutation_mode: PermutationMode::All,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_permutations == 0 {
            return Err(Error::InvalidArgument("n_permutations must be at least 1".into()));
        }
        if !(self.clamp_epsilon > 0.0 && self.clamp_epsilon < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "clamp_epsilon must lie in (0, 0.5), got {}",
                self.clamp_epsilon
            )));
        }
        Ok(())
    }

    /// Orderings of `dim` coordinates for one evaluation site.
    pub fn orderings<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
        match &self.permutation_mode {
            PermutationMode::FixedRandom => Ok((0..self.n_permutations)
                .map(|_| {
                    let mut o: Vec<usize> = (0..dim).collect();
                    o.shuffle(rng);
                    o
                })
                .collect()),
            PermutationMode::All => Ok(all_orderings(dim)),
            PermutationMode::Given(orders) => {
                for o in orders {
                    check_ordering(o, dim)?;
                }
                if orders.is_empty() {
                    return Err(Error::InvalidArgument("no orderings given".into()));
                }
                Ok(orders.clone())
            }
        }
    }
}

fn check_ordering(o: &[usize], dim: usize) -> Result<()> {
    let mut seen = vec![false; dim];
    if o.len() != dim {
        return Err(Error::DimensionMismatch {
            what: "ordering".into(),
            expected: dim,
            got: o.len(),
        });
    }
    for &i in o {
        if i >= dim || seen[i] {
            return Err(Error::InvalidArgument(format!("{o:?} is not a permutation of 0..{dim}")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Every permutation of `0..dim` in lexicographic order.
pub fn all_orderings(dim: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..dim).collect();
    loop {
        out.push(cur.clone());
        // next lexicographic permutation
        let Some(i) = (1..dim).rev().find(|&i| cur[i - 1] < cur[i]) else {
            break;
        };
        let j = (i..dim).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
    out
}

/// Approximate `Phi_D(b; 0, R)` with the Solow-Joe scheme, averaging over the
/// configured orderings. `r` must be a unit-diagonal symmetric matrix.
pub fn sj_mvncdf<G: Rng + ?Sized>(b: &[f64], r: &DMatrix<f64>, cfg: &SjConfig, rng: &mut G) -> Result<f64> {
    cfg.validate()?;
    let dim = b.len();
    if dim == 0 {
        return Err(Error::InvalidArgument("empty limit vector".into()));
    }
    if r.nrows() != dim || r.ncols() != dim {
        return Err(Error::DimensionMismatch {
            what: "correlation matrix".into(),
            expected: dim,
            got: r.nrows(),
        });
    }
    let orders = cfg.orderings(dim, rng)?;
    let flat: Vec<f64> = (0..dim * dim).map(|k| r[(k / dim, k % dim)]).collect();
    let mut ws = SjWorkspace::new(dim);
    let lp = ws.log_prob(b, &flat, &orders, cfg.clamp_epsilon, None)?;
    Ok(lp.exp())
}

/// Scratch buffers for repeated evaluations at a fixed dimension.
#[derive(Debug, Clone)]
pub struct SjWorkspace {
    dim: usize,
    bp: Vec<f64>,
    rp: Vec<f64>,
    phi: Vec<f64>,
    pdf: Vec<f64>,
    pm: Vec<f64>,
    chol: Vec<f64>,
    z: Vec<f64>,
    lq: Vec<f64>,
    // reverse-mode buffers
    gphi: Vec<f64>,
    gpm: Vec<f64>,
    lbar: Vec<f64>,
    zbar: Vec<f64>,
    lqbar: Vec<f64>,
    rbar: Vec<f64>,
    qbar: Vec<f64>,
    tmp: Vec<f64>,
    smat: Vec<f64>,
    gb: Vec<f64>,
    gr: Vec<f64>,
    acc_b: Vec<f64>,
    acc_r: Vec<f64>,
}

/// Gradient buffers: `b` has length `dim`, `r` is a row-major `dim x dim`
/// array where entry `(i, j)` with `i != j` holds the derivative with respect
/// to the single symmetric variable `R_ij = R_ji` (mirrored on both sides).
pub struct SjGradient<'a> {
    pub b: &'a mut [f64],
    pub r: &'a mut [f64],
}

impl SjWorkspace {
    pub fn new(dim: usize) -> Self {
        let m = dim.saturating_sub(1).max(1);
        Self {
            dim,
            bp: vec![0.0; dim],
            rp: vec![0.0; dim * dim],
            phi: vec![0.0; dim],
            pdf: vec![0.0; dim],
            pm: vec![0.0; dim * dim],
            chol: vec![0.0; m * m],
            z: vec![0.0; m],
            lq: vec![0.0; m],
            gphi: vec![0.0; dim],
            gpm: vec![0.0; dim * dim],
            lbar: vec![0.0; m * m],
            zbar: vec![0.0; m],
            lqbar: vec![0.0; m],
            rbar: vec![0.0; m],
            qbar: vec![0.0; m],
            tmp: vec![0.0; m * m],
            smat: vec![0.0; m * m],
            gb: vec![0.0; dim],
            gr: vec![0.0; dim * dim],
            acc_b: vec![0.0; dim],
            acc_r: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Log of the ordering-averaged approximation. When `grad` is given it
    /// receives the gradient of the log probability (overwritten).
    pub fn log_prob(
        &mut self,
        b: &[f64],
        r: &[f64],
        orders: &[Vec<usize>],
        eps: f64,
        grad: Option<SjGradient<'_>>,
    ) -> Result<f64> {
        let d = self.dim;
        debug_assert_eq!(b.len(), d);
        debug_assert_eq!(r.len(), d * d);
        if orders.len() == 1 {
            let want = grad.is_some();
            let lp = self.ordered(b, r, &orders[0], eps, want)?;
            if let Some(g) = grad {
                self.scatter(&orders[0], 1.0, g.b, g.r, true);
            }
            return Ok(lp);
        }
        // average probabilities; d log(mean p) = sum_o p_o d log p_o / sum_o p_o
        let want = grad.is_some();
        let mut logs = Vec::with_capacity(orders.len());
        if want {
            self.acc_b.iter_mut().for_each(|v| *v = 0.0);
            self.acc_r.iter_mut().for_each(|v| *v = 0.0);
        }
        // first pass for the maximum log to keep the weights in range
        let mut per_order_grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for o in orders {
            let lp = self.ordered(b, r, o, eps, want)?;
            logs.push(lp);
            if want {
                let mut gb = vec![0.0; d];
                let mut gr = vec![0.0; d * d];
                self.scatter(o, 1.0, &mut gb, &mut gr, true);
                per_order_grads.push((gb, gr));
            }
        }
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
        let wsum: f64 = weights.iter().sum();
        let lp = mx + (wsum / orders.len() as f64).ln();
        if let Some(g) = grad {
            g.b.iter_mut().for_each(|v| *v = 0.0);
            g.r.iter_mut().for_each(|v| *v = 0.0);
            for (w, (gb, gr)) in weights.iter().zip(&per_order_grads) {
                let s = w / wsum;
                for (t, v) in g.b.iter_mut().zip(gb) {
                    *t += s * v;
                }
                for (t, v) in g.r.iter_mut().zip(gr) {
                    *t += s * v;
                }
            }
        }
        Ok(lp)
    }

    /// Copy permuted-space gradients into original coordinates.
    fn scatter(&self, order: &[usize], scale: f64, gb: &mut [f64], gr: &mut [f64], overwrite: bool) {
        let d = self.dim;
        if overwrite {
            gb.iter_mut().for_each(|v| *v = 0.0);
            gr.iter_mut().for_each(|v| *v = 0.0);
        }
        for i in 0..d {
            gb[order[i]] += scale * self.gb[i];
            for j in (i + 1)..d {
                let g = scale * self.gr[i * d + j];
                if g != 0.0 {
                    let (a, c) = (order[i], order[j]);
                    gr[a * d + c] += g;
                    gr[c * d + a] += g;
                }
            }
        }
    }

    /// Log probability for one ordering; fills `self.gb`/`self.gr` (permuted
    /// coordinates, upper triangle) when `want_grad`.
    fn ordered(&mut self, b: &[f64], r: &[f64], order: &[usize], eps: f64, want_grad: bool) -> Result<f64> {
        let d = self.dim;
        for i in 0..d {
            self.bp[i] = b[order[i]];
            for j in 0..d {
                self.rp[i * d + j] = r[order[i] * d + order[j]];
            }
        }
        if want_grad {
            self.gb.iter_mut().for_each(|v| *v = 0.0);
            self.gr.iter_mut().for_each(|v| *v = 0.0);
        }

        if d == 1 {
            let p = std_normal_cdf(self.bp[0]);
            if p <= eps {
                return Ok(eps.ln());
            }
            if want_grad {
                self.gb[0] = std_normal_pdf(self.bp[0]) / p;
            }
            return Ok(p.ln());
        }

        if d == 2 {
            let rho = self.rp[1];
            let p = bvn_cdf(self.bp[0], self.bp[1], rho);
            if p <= eps {
                return Ok(eps.ln());
            }
            if want_grad {
                let (d1, d2, dr) = bvn_cdf_partials(self.bp[0], self.bp[1], rho);
                self.gb[0] = d1 / p;
                self.gb[1] = d2 / p;
                self.gr[1] = dr / p;
            }
            return Ok(p.ln());
        }

        let m = d - 1;
        for i in 0..d {
            self.phi[i] = std_normal_cdf(self.bp[i]);
            self.pdf[i] = std_normal_pdf(self.bp[i]);
        }
        for i in 0..d {
            for j in (i + 1)..d {
                self.pm[i * d + j] = bvn_cdf(self.bp[i], self.bp[j], self.rp[i * d + j]);
            }
        }

        // Cholesky of the leading m x m indicator covariance
        let mut ok = self.factor_q(0.0);
        if !ok {
            ok = self.factor_q(Q_JITTER);
        }
        if !ok {
            return Err(Error::Singular("Solow-Joe indicator covariance".into()));
        }
        let phi_last = self.phi[m];
        for j in 0..m {
            self.lq[j] = self.pm[j * d + m] - self.phi[j] * phi_last;
        }
        // z = L^{-1} (1 - phi), lq = L^{-1} q
        for i in 0..m {
            let mut sz = 1.0 - self.phi[i];
            let mut sq = self.lq[i];
            for k in 0..i {
                let lik = self.chol[i * m + k];
                sz -= lik * self.z[k];
                sq -= lik * self.lq[k];
            }
            let lii = self.chol[i * m + i];
            self.z[i] = sz / lii;
            self.lq[i] = sq / lii;
        }

        let lead = self.pm[1];
        let mut logp = lead.max(eps).ln();
        // conditional factors with their log-derivative (0 when clamped)
        let mut gfac = [0.0f64; 64];
        let mut gfac_vec;
        let gfac: &mut [f64] = if d <= 64 {
            &mut gfac[..d]
        } else {
            gfac_vec = vec![0.0; d];
            &mut gfac_vec[..]
        };
        for k in 2..d {
            let mut p = self.phi[k];
            if k < m {
                for j in 0..k {
                    p += self.chol[k * m + j] * self.z[j];
                }
            } else {
                for j in 0..m {
                    p += self.lq[j] * self.z[j];
                }
            }
            let (v, dv) = bound_factor(p, eps);
            logp += v.ln();
            gfac[k] = dv / v;
        }
        if !logp.is_finite() {
            return Err(Error::NonFinite("Solow-Joe log probability".into()));
        }
        if !want_grad {
            return Ok(logp);
        }

        // ---- reverse pass ----
        self.gphi.iter_mut().for_each(|v| *v = 0.0);
        self.gpm.iter_mut().for_each(|v| *v = 0.0);
        self.lbar.iter_mut().for_each(|v| *v = 0.0);
        self.zbar.iter_mut().for_each(|v| *v = 0.0);
        self.lqbar.iter_mut().for_each(|v| *v = 0.0);
        if lead > eps {
            self.gpm[1] += 1.0 / lead;
        }
        for k in 2..d {
            let g = gfac[k];
            if g == 0.0 {
                continue;
            }
            self.gphi[k] += g;
            if k < m {
                for j in 0..k {
                    self.lbar[k * m + j] += g * self.z[j];
                    self.zbar[j] += g * self.chol[k * m + j];
                }
            } else {
                for j in 0..m {
                    self.lqbar[j] += g * self.z[j];
                    self.zbar[j] += g * self.lq[j];
                }
            }
        }
        // rbar = L^{-T} zbar, qbar = L^{-T} lqbar (back substitution)
        for i in (0..m).rev() {
            let mut sr = self.zbar[i];
            let mut sq = self.lqbar[i];
            for k in (i + 1)..m {
                let lki = self.chol[k * m + i];
                sr -= lki * self.rbar[k];
                sq -= lki * self.qbar[k];
            }
            let lii = self.chol[i * m + i];
            self.rbar[i] = sr / lii;
            self.qbar[i] = sq / lii;
        }
        // Lbar -= tril(rbar z' + qbar lq')
        for i in 0..m {
            for j in 0..=i {
                self.lbar[i * m + j] -= self.rbar[i] * self.z[j] + self.qbar[i] * self.lq[j];
            }
        }
        self.cholesky_adjoint(m);

        // Q_ii = phi_i (1 - phi_i); Q_ij = P_ij - phi_i phi_j; r_i = 1 - phi_i
        for i in 0..m {
            let s_ii = self.smat[i * m + i];
            self.gphi[i] += s_ii * (1.0 - 2.0 * self.phi[i]) - self.rbar[i];
            for j in (i + 1)..m {
                let g = self.smat[i * m + j] + self.smat[j * m + i];
                self.gpm[i * d + j] += g;
                self.gphi[i] -= g * self.phi[j];
                self.gphi[j] -= g * self.phi[i];
            }
        }
        for j in 0..m {
            let g = self.qbar[j];
            self.gpm[j * d + m] += g;
            self.gphi[j] -= g * phi_last;
            self.gphi[m] -= g * self.phi[j];
        }

        for i in 0..d {
            self.gb[i] += self.gphi[i] * self.pdf[i];
            for j in (i + 1)..d {
                let g = self.gpm[i * d + j];
                if g != 0.0 {
                    let (d1, d2, dr) = bvn_cdf_partials(self.bp[i], self.bp[j], self.rp[i * d + j]);
                    self.gb[i] += g * d1;
                    self.gb[j] += g * d2;
                    self.gr[i * d + j] += g * dr;
                }
            }
        }
        Ok(logp)
    }

    /// Cholesky of the leading `m x m` indicator covariance plus `jitter * I`.
    fn factor_q(&mut self, jitter: f64) -> bool {
        let d = self.dim;
        let m = d - 1;
        for i in 0..m {
            for j in 0..=i {
                let q = if i == j {
                    self.phi[i] * (1.0 - self.phi[i]) + jitter
                } else {
                    self.pm[j * d + i] - self.phi[i] * self.phi[j]
                };
                let mut s = q;
                for k in 0..j {
                    s -= self.chol[i * m + k] * self.chol[j * m + k];
                }
                if i == j {
                    if !(s > 0.0) {
                        return false;
                    }
                    self.chol[i * m + i] = s.sqrt();
                } else {
                    self.chol[i * m + j] = s / self.chol[j * m + j];
                }
            }
            for j in (i + 1)..m {
                self.chol[i * m + j] = 0.0;
            }
        }
        true
    }

    /// Symmetric-input adjoint of the Cholesky factorization:
    /// `S = L^{-T} Phi(L' Lbar) L^{-1}`, with `Phi` taking the lower triangle
    /// and halving the diagonal. Result in `self.smat`.
    fn cholesky_adjoint(&mut self, m: usize) {
        let l = &self.chol;
        let lb = &self.lbar;
        let p = &mut self.tmp;
        // P = Phi(L' Lbar)
        for i in 0..m {
            for j in 0..m {
                if j > i {
                    p[i * m + j] = 0.0;
                    continue;
                }
                let mut s = 0.0;
                for k in i..m {
                    s += l[k * m + i] * lb[k * m + j];
                }
                p[i * m + j] = if i == j { 0.5 * s } else { s };
            }
        }
        // X = L^{-T} P, solved column by column (L' upper triangular)
        let s = &mut self.smat;
        for c in 0..m {
            for i in (0..m).rev() {
                let mut v = p[i * m + c];
                for k in (i + 1)..m {
                    v -= l[k * m + i] * s[k * m + c];
                }
                s[i * m + c] = v / l[i * m + i];
            }
        }
        // S = X L^{-1}: each row x solves s L = x, i.e. L' s' = x'
        for rrow in 0..m {
            for j in (0..m).rev() {
                let mut v = s[rrow * m + j];
                for k in (j + 1)..m {
                    v -= s[rrow * m + k] * l[k * m + j];
                }
                s[rrow * m + j] = v / l[j * m + j];
            }
        }
    }
}
