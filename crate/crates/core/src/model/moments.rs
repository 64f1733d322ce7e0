use nalgebra::DMatrix;

use super::dataset::PanelDataset;
use super::spec::{unpack, ModelSpec};
use crate::error::{Error, Result};

/// Standardized upper limits and correlation matrix of the stacked utility
/// differences of one occasion pair, so that the pair probability equals
/// `Phi_{2K-2}(b; 0, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMoments {
    pub b: Vec<f64>,
    pub r: DMatrix<f64>,
}

impl PairMoments {
    pub fn dim(&self) -> usize {
        self.b.len()
    }
}

/// Moments of the pair `(t, t2)` of individual `n` at `theta`.
pub fn build_pair_moments(
    data: &PanelDataset,
    n: usize,
    t: usize,
    t2: usize,
    theta: &[f64],
    spec: &ModelSpec,
) -> Result<PairMoments> {
    check_compatible(data, spec)?;
    if n >= data.n_individuals() || t >= t2 || t2 >= data.n_occasions() {
        return Err(Error::InvalidArgument(format!(
            "pair (n={n}, t={t}, t2={t2}) is not a valid index with t < t2"
        )));
    }
    let engine = MomentEngine::new(data, theta, spec)?;
    let mut buf = MomentBuf::new(data, spec);
    engine.prepare_individual(&mut buf, n);
    engine.pair(&mut buf, t, t2)?;
    let d = buf.dim;
    Ok(PairMoments {
        b: buf.b.clone(),
        r: DMatrix::from_row_slice(d, d, &buf.r),
    })
}

pub(crate) fn check_compatible(data: &PanelDataset, spec: &ModelSpec) -> Result<()> {
    if data.p_beta() != spec.p_beta {
        return Err(Error::DimensionMismatch {
            what: "fixed-coefficient covariates".into(),
            expected: spec.p_beta,
            got: data.p_beta(),
        });
    }
    if data.p_alpha() != spec.p_alpha {
        return Err(Error::DimensionMismatch {
            what: "random-coefficient covariates".into(),
            expected: spec.p_alpha,
            got: data.p_alpha(),
        });
    }
    Ok(())
}

/// Parameter-dependent pieces shared by every pair evaluation at one `theta`.
pub(crate) struct MomentEngine<'a> {
    data: &'a PanelDataset,
    beta: Vec<f64>,
    /// `L`, row-major `q x q`.
    l: Vec<f64>,
    sigma2: f64,
    q: usize,
    km1: usize,
}

/// Scratch for one individual and one pair at a time.
#[derive(Debug, Clone)]
pub(crate) struct MomentBuf {
    pub(crate) dim: usize,
    n: usize,
    /// `Dz_t L` per occasion, `(K-1) x q` each.
    mt: Vec<f64>,
    /// `Dx_t beta` per occasion.
    mean_t: Vec<f64>,
    t: usize,
    t2: usize,
    pub(crate) b: Vec<f64>,
    pub(crate) r: Vec<f64>,
    v_diag: Vec<f64>,
    s: Vec<f64>,
    mu_bar: Vec<f64>,
    w: Vec<f64>,
    wm: Vec<f64>,
}

impl MomentBuf {
    pub(crate) fn new(data: &PanelDataset, spec: &ModelSpec) -> Self {
        let km1 = data.n_alternatives() - 1;
        let dim = 2 * km1;
        let q = spec.p_alpha;
        Self {
            dim,
            n: 0,
            mt: vec![0.0; data.n_occasions() * km1 * q],
            mean_t: vec![0.0; data.n_occasions() * km1],
            t: 0,
            t2: 0,
            b: vec![0.0; dim],
            r: vec![0.0; dim * dim],
            v_diag: vec![0.0; dim],
            s: vec![0.0; dim],
            mu_bar: vec![0.0; dim],
            w: vec![0.0; dim * dim],
            wm: vec![0.0; dim * q],
        }
    }
}

impl<'a> MomentEngine<'a> {
    pub(crate) fn new(data: &'a PanelDataset, theta: &[f64], spec: &ModelSpec) -> Result<Self> {
        let (beta, l) = unpack(theta, spec)?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("theta".into()));
        }
        let q = spec.p_alpha;
        let mut lf = vec![0.0; q * q];
        for r in 0..q {
            for c in 0..q {
                lf[r * q + c] = l[(r, c)];
            }
        }
        Ok(Self {
            data,
            beta,
            l: lf,
            sigma2: spec.sigma_diag,
            q,
            km1: data.n_alternatives() - 1,
        })
    }

    pub(crate) fn prepare_individual(&self, buf: &mut MomentBuf, n: usize) {
        let (q, km1, p) = (self.q, self.km1, self.beta.len());
        buf.n = n;
        for t in 0..self.data.n_occasions() {
            let dx = self.data.diff_fixed(n, t);
            let dz = self.data.diff_random(n, t);
            for i in 0..km1 {
                let row = &dx[i * p..(i + 1) * p];
                buf.mean_t[t * km1 + i] = row.iter().zip(&self.beta).map(|(a, b)| a * b).sum();
                let zrow = &dz[i * q..(i + 1) * q];
                let out = &mut buf.mt[(t * km1 + i) * q..(t * km1 + i + 1) * q];
                for (c, o) in out.iter_mut().enumerate() {
                    // L is lower triangular: (zL)_c = sum_{r >= c} z_r L_rc
                    let mut s = 0.0;
                    for (r, z) in zrow.iter().enumerate().skip(c) {
                        s += z * self.l[r * q + c];
                    }
                    *o = s;
                }
            }
        }
    }

    #[inline]
    fn row_of(&self, buf: &MomentBuf, i: usize) -> (usize, usize) {
        if i < self.km1 {
            (buf.t, i)
        } else {
            (buf.t2, i - self.km1)
        }
    }

    /// Fill `buf.b` and `buf.r` for the pair `(t, t2)` of the prepared
    /// individual.
    pub(crate) fn pair(&self, buf: &mut MomentBuf, t: usize, t2: usize) -> Result<()> {
        let (q, km1, d) = (self.q, self.km1, buf.dim);
        buf.t = t;
        buf.t2 = t2;
        for i in 0..d {
            let (ti, li) = self.row_of(buf, i);
            let mi = &buf.mt[(ti * km1 + li) * q..(ti * km1 + li + 1) * q];
            for j in i..d {
                let (tj, lj) = self.row_of(buf, j);
                let mj = &buf.mt[(tj * km1 + lj) * q..(tj * km1 + lj + 1) * q];
                let mut v: f64 = mi.iter().zip(mj).map(|(a, b)| a * b).sum();
                if ti == tj {
                    v += if i == j { 2.0 * self.sigma2 } else { self.sigma2 };
                }
                buf.r[i * d + j] = v;
            }
            let vii = buf.r[i * d + i];
            if !vii.is_finite() {
                return Err(Error::NonFinite("pair covariance".into()));
            }
            if vii <= 0.0 {
                return Err(Error::DegenerateVariance { index: i, value: vii });
            }
            buf.v_diag[i] = vii;
            buf.s[i] = vii.sqrt();
        }
        for i in 0..d {
            let (ti, li) = self.row_of(buf, i);
            buf.b[i] = -buf.mean_t[ti * km1 + li] / buf.s[i];
            buf.r[i * d + i] = 1.0;
            for j in (i + 1)..d {
                let v = (buf.r[i * d + j] / (buf.s[i] * buf.s[j])).clamp(-1.0, 1.0);
                buf.r[i * d + j] = v;
                buf.r[j * d + i] = v;
            }
            if !buf.b[i].is_finite() {
                return Err(Error::NonFinite("pair limits".into()));
            }
        }
        Ok(())
    }

    /// Pull the gradient with respect to `(b, R)` of the last pair back to
    /// `beta` and the full `L` (row-major `q x q`, lower triangle used).
    /// `gr` follows the single-symmetric-variable convention of the
    /// Solow-Joe workspace. Adds into `gbeta` and `gl`.
    pub(crate) fn pair_adjoint(&self, buf: &mut MomentBuf, gb: &[f64], gr: &[f64], gbeta: &mut [f64], gl: &mut [f64]) {
        let (q, km1, d, p) = (self.q, self.km1, buf.dim, self.beta.len());
        let n = buf.n;
        for i in 0..d {
            buf.mu_bar[i] = -gb[i] / buf.s[i];
            let mut wii = -gb[i] * buf.b[i] / (2.0 * buf.v_diag[i]);
            for j in 0..d {
                if j != i {
                    wii -= gr[i * d + j] * buf.r[i * d + j] / (2.0 * buf.v_diag[i]);
                    buf.w[i * d + j] = gr[i * d + j] / (2.0 * buf.s[i] * buf.s[j]);
                }
            }
            buf.w[i * d + i] = wii;
        }
        // beta
        for i in 0..d {
            let (ti, li) = self.row_of(buf, i);
            let dx = &self.data.diff_fixed(n, ti)[li * p..(li + 1) * p];
            for (g, x) in gbeta.iter_mut().zip(dx) {
                *g += buf.mu_bar[i] * x;
            }
        }
        // L: Lbar = 2 Z' W M
        for i in 0..d {
            for c in 0..q {
                let mut s = 0.0;
                for j in 0..d {
                    let (tj, lj) = self.row_of(buf, j);
                    s += buf.w[i * d + j] * buf.mt[(tj * km1 + lj) * q + c];
                }
                buf.wm[i * q + c] = 2.0 * s;
            }
        }
        for i in 0..d {
            let (ti, li) = self.row_of(buf, i);
            let z = &self.data.diff_random(n, ti)[li * q..(li + 1) * q];
            for r in 0..q {
                if z[r] == 0.0 {
                    continue;
                }
                for c in 0..=r {
                    gl[r * q + c] += z[r] * buf.wm[i * q + c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::CholeskyEntry;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(n: usize, t: usize, k: usize, p: usize, q: usize, seed: u64) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let choices = (0..n * t).map(|_| rng.random_range(0..k)).collect();
        let xf = (0..n * t * k * p).map(|_| rng.random_range(-1.5..1.5)).collect();
        let xr = (0..n * t * k * q).map(|_| rng.random_range(-1.5..1.5)).collect();
        PanelDataset::new(n, t, k, p, q, choices, xf, xr).unwrap()
    }

    #[test]
    fn zero_omega_block_structure() {
        let data = random_data(3, 3, 5, 2, 2, 1);
        let mut pat = vec![CholeskyEntry::Fixed(0.0); 3];
        pat[0] = CholeskyEntry::Free;
        pat[2] = CholeskyEntry::Free;
        let spec = ModelSpec::new(2, 2, pat, 0.5, vec![], vec![]).unwrap();
        let pm = build_pair_moments(&data, 1, 0, 2, &[0.4, -0.7, 0.0, 0.0], &spec).unwrap();
        assert_eq!(pm.dim(), 8);
        // independent assembly: D * cov(e) * D' for two occasions
        let k = 5;
        let mut dmat = DMatrix::<f64>::zeros(8, 2 * k);
        for (blk, t) in [0usize, 2].iter().enumerate() {
            let y = data.choice(1, *t);
            let mut row = 0;
            for a in (0..k).filter(|&a| a != y) {
                dmat[(blk * 4 + row, blk * k + a)] = 1.0;
                dmat[(blk * 4 + row, blk * k + y)] = -1.0;
                row += 1;
            }
        }
        let cov = &dmat * DMatrix::<f64>::identity(2 * k, 2 * k) * 0.5 * dmat.transpose();
        for i in 0..8 {
            for j in 0..8 {
                let want = cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt();
                assert!((pm.r[(i, j)] - want).abs() < 1e-15);
                let expect = if i == j { 1.0 } else if (i < 4) == (j < 4) { 0.5 } else { 0.0 };
                assert!((pm.r[(i, j)] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_alternatives_give_bivariate_moments() {
        let data = random_data(2, 2, 2, 1, 1, 3);
        let spec = ModelSpec::new(1, 1, ModelSpec::full_pattern(1), 0.5, vec![], vec![]).unwrap();
        let pm = build_pair_moments(&data, 0, 0, 1, &[0.8, 0.9], &spec).unwrap();
        assert_eq!(pm.dim(), 2);
    }

    fn full_spec(p: usize, q: usize) -> ModelSpec {
        ModelSpec::new(p, q, ModelSpec::full_pattern(q), 0.5, vec![], vec![]).unwrap()
    }

    fn random_theta(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..spec.dim()).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn correlation_is_psd_with_unit_diagonal() {
        let data = random_data(4, 4, 4, 3, 3, 7);
        let spec = full_spec(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let theta = random_theta(&spec, &mut rng);
            let n = rng.random_range(0..4);
            let pm = build_pair_moments(&data, n, 1, 3, &theta, &spec).unwrap();
            for i in 0..pm.dim() {
                assert_eq!(pm.r[(i, i)], 1.0);
                for j in 0..pm.dim() {
                    assert_eq!(pm.r[(i, j)], pm.r[(j, i)]);
                    assert!(pm.r[(i, j)].abs() <= 1.0);
                }
            }
            let min = SymmetricEigen::new(pm.r.clone()).eigenvalues.min();
            assert!(min >= -1e-10);
        }
    }

    #[test]
    fn scale_invariance() {
        let data = random_data(2, 3, 4, 2, 2, 9);
        let spec = full_spec(2, 2);
        let theta = vec![0.7, -1.1, 0.9, 0.3, 0.6];
        let pm = build_pair_moments(&data, 1, 0, 2, &theta, &spec).unwrap();
        for c in [0.3, 2.0, 7.5] {
            let scaled_theta: Vec<f64> = theta.iter().map(|v| v * c).collect();
            let scaled_spec = ModelSpec {
                sigma_diag: spec.sigma_diag * c * c,
                ..spec.clone()
            };
            let ps = build_pair_moments(&data, 1, 0, 2, &scaled_theta, &scaled_spec).unwrap();
            for i in 0..pm.dim() {
                assert!((pm.b[i] - ps.b[i]).abs() < 1e-12);
                for j in 0..pm.dim() {
                    assert!((pm.r[(i, j)] - ps.r[(i, j)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn relabeling_alternatives_permutes_moments() {
        // swap two non-chosen alternatives in every occasion and compare
        let (n, t, k, p, q) = (1, 2, 4, 2, 2);
        let choices = vec![0, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xf: Vec<f64> = (0..n * t * k * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xr: Vec<f64> = (0..n * t * k * q).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data = PanelDataset::new(n, t, k, p, q, choices.clone(), xf.clone(), xr.clone()).unwrap();
        let swap = |x: &[f64], w: usize| {
            let mut y = x.to_vec();
            // occasion 0: swap alternatives 1 and 2; occasion 1: swap 0 and 2
            for (occ, (a, b)) in [(0usize, (1usize, 2usize)), (1, (0, 2))] {
                for j in 0..w {
                    y.swap((occ * k + a) * w + j, (occ * k + b) * w + j);
                }
            }
            y
        };
        let data2 = PanelDataset::new(n, t, k, p, q, choices, swap(&xf, p), swap(&xr, q)).unwrap();
        let spec = full_spec(p, q);
        let theta = vec![0.5, -0.4, 1.0, 0.3, 0.8];
        let a = build_pair_moments(&data, 0, 0, 1, &theta, &spec).unwrap();
        let b = build_pair_moments(&data2, 0, 0, 1, &theta, &spec).unwrap();
        // row order of differences: occasion 0 rows (1,2,3) -> (2,1,3); occasion 1 rows (0,1,2) -> (2,1,0)
        let perm = [1usize, 0, 2, 5, 4, 3];
        for i in 0..6 {
            assert!((a.b[perm[i]] - b.b[i]).abs() < 1e-14);
            for j in 0..6 {
                assert!((a.r[(perm[i], perm[j])] - b.r[(i, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let data = random_data(2, 3, 4, 2, 3, 12);
        let spec = full_spec(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = random_theta(&spec, &mut rng);
        let d = 6;
        // random linear functional of (b, R)
        let gb: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut gr = vec![0.0; d * d];
        for i in 0..d {
            for j in (i + 1)..d {
                let v = rng.random_range(-1.0..1.0);
                gr[i * d + j] = v;
                gr[j * d + i] = v;
            }
        }
        let functional = |th: &[f64]| {
            let pm = build_pair_moments(&data, 1, 0, 2, th, &spec).unwrap();
            let mut s: f64 = pm.b.iter().zip(&gb).map(|(a, b)| a * b).sum();
            for i in 0..d {
                for j in (i + 1)..d {
                    s += gr[i * d + j] * pm.r[(i, j)];
                }
            }
            s
        };
        let engine = MomentEngine::new(&data, &theta, &spec).unwrap();
        let mut buf = MomentBuf::new(&data, &spec);
        engine.prepare_individual(&mut buf, 1);
        engine.pair(&mut buf, 0, 2).unwrap();
        let mut gbeta = vec![0.0; 2];
        let mut gl = vec![0.0; 9];
        engine.pair_adjoint(&mut buf, &gb, &gr, &mut gbeta, &mut gl);
        let mut analytic = gbeta.clone();
        for (r, c) in spec.free_l_positions() {
            analytic.push(gl[r * 3 + c]);
        }
        for (k, an) in analytic.iter().enumerate() {
            let h = 1e-6;
            let mut up = theta.clone();
            up[k] += h;
            let mut dn = theta.clone();
            dn[k] -= h;
            let fd = (functional(&up) - functional(&dn)) / (2.0 * h);
            assert!((fd - an).abs() < 1e-7, "coordinate {k}: {fd} vs {an}");
        }
    }
}
