//! Pairwise composite marginal log-likelihood and its scores.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{PermutationMode, SjConfig, SjGradient, SjWorkspace};
use crate::model::{check_compatible, MomentBuf, MomentEngine, ModelSpec, PanelDataset};

/// Approximation settings and the run-level seed that fixes the ordering
/// used for every pair. Fits that share a context see identical
/// approximations of each pair probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmlContext {
    pub sj: SjConfig,
    pub seed: u64,
}

impl Default for CmlContext {
    fn default() -> Self {
        Self {
            sj: SjConfig::default(),
            seed: 0,
        }
    }
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl CmlContext {
    pub fn new(sj: SjConfig, seed: u64) -> Self {
        Self { sj, seed }
    }

    /// Orderings for the pair `(t, t2)` of individual `n`. Random orderings
    /// are keyed by the seed, the individual's content and the occasion
    /// indices, so they do not depend on where the individual sits in the
    /// dataset.
    pub fn orderings(&self, data: &PanelDataset, n: usize, t: usize, t2: usize, dim: usize) -> Result<Vec<Vec<usize>>> {
        match self.sj.permutation_mode {
            PermutationMode::FixedRandom => {
                let key = splitmix(splitmix(splitmix(self.seed) ^ data.individual_key(n)) ^ ((t as u64) << 32 | t2 as u64));
                let mut rng = ChaCha8Rng::seed_from_u64(key);
                Ok((0..self.sj.n_permutations)
                    .map(|_| {
                        let mut o: Vec<usize> = (0..dim).collect();
                        o.shuffle(&mut rng);
                        o
                    })
                    .collect())
            }
            _ => self.sj.orderings(dim, &mut ChaCha8Rng::seed_from_u64(self.seed)),
        }
    }
}

/// How the score is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    /// Reverse-mode derivative of the approximation.
    #[default]
    Analytic,
    /// Central differences with step `sqrt(eps) * max(1, |theta_i|)`.
    FiniteDifference,
}

/// Per-pair, per-individual and total scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub dim: usize,
    pub n_pairs: usize,
    /// `N x d`.
    pub per_individual: DMatrix<f64>,
    /// Flat `N x pairs x d`, see [`ScoreSet::pair`].
    pub per_pair: Vec<f64>,
    pub total: DVector<f64>,
}

impl ScoreSet {
    fn from_pairs(per_pair: Vec<f64>, n: usize, n_pairs: usize, dim: usize) -> Self {
        let mut per_individual = DMatrix::zeros(n, dim);
        for i in 0..n {
            for k in 0..n_pairs {
                let row = &per_pair[(i * n_pairs + k) * dim..(i * n_pairs + k + 1) * dim];
                for (j, v) in row.iter().enumerate() {
                    per_individual[(i, j)] += v;
                }
            }
        }
        let mut total = DVector::zeros(dim);
        for i in 0..n {
            for j in 0..dim {
                total[j] += per_individual[(i, j)];
            }
        }
        Self {
            dim,
            n_pairs,
            per_individual,
            per_pair,
            total,
        }
    }

    pub fn n_individuals(&self) -> usize {
        self.per_individual.nrows()
    }

    /// Score of pair `k` (in `(t, t2)` lexicographic order) of individual `n`.
    pub fn pair(&self, n: usize, k: usize) -> &[f64] {
        let i = (n * self.n_pairs + k) * self.dim;
        &self.per_pair[i..i + self.dim]
    }
}

/// Occasion pairs `(t, t2)`, `t < t2`, in lexicographic order.
pub fn occasion_pairs(n_occasions: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for t in 0..n_occasions {
        for t2 in (t + 1)..n_occasions {
            out.push((t, t2));
        }
    }
    out
}

struct Scratch {
    buf: MomentBuf,
    ws: SjWorkspace,
    gb: Vec<f64>,
    gr: Vec<f64>,
    gbeta: Vec<f64>,
    gl: Vec<f64>,
}

impl Scratch {
    fn new(data: &PanelDataset, spec: &ModelSpec) -> Self {
        let buf = MomentBuf::new(data, spec);
        let d = buf.dim;
        Self {
            ws: SjWorkspace::new(d),
            gb: vec![0.0; d],
            gr: vec![0.0; d * d],
            gbeta: vec![0.0; spec.p_beta],
            gl: vec![0.0; spec.p_alpha * spec.p_alpha],
            buf,
        }
    }
}

struct Evaluator<'a> {
    data: &'a PanelDataset,
    spec: &'a ModelSpec,
    ctx: &'a CmlContext,
    engine: MomentEngine<'a>,
    pairs: Vec<(usize, usize)>,
    free_l: Vec<(usize, usize)>,
}

impl<'a> Evaluator<'a> {
    fn new(data: &'a PanelDataset, theta: &[f64], spec: &'a ModelSpec, ctx: &'a CmlContext) -> Result<Self> {
        check_compatible(data, spec)?;
        ctx.sj.validate()?;
        if theta.len() != spec.dim() {
            return Err(Error::DimensionMismatch {
                what: "theta".into(),
                expected: spec.dim(),
                got: theta.len(),
            });
        }
        Ok(Self {
            data,
            spec,
            ctx,
            engine: MomentEngine::new(data, theta, spec)?,
            pairs: occasion_pairs(data.n_occasions()),
            free_l: spec.free_l_positions(),
        })
    }

    /// Log-likelihood contributions of every pair of individual `n`; with
    /// `grads` also their gradients (`pairs x d`).
    fn individual(&self, s: &mut Scratch, n: usize, out: &mut [f64], mut grads: Option<&mut [f64]>) -> Result<()> {
        let d = self.spec.dim();
        let q = self.spec.p_alpha;
        let pb = self.spec.p_beta;
        let dim = s.buf.dim;
        let eps = self.ctx.sj.clamp_epsilon;
        self.engine.prepare_individual(&mut s.buf, n);
        for (k, &(t, t2)) in self.pairs.iter().enumerate() {
            self.engine.pair(&mut s.buf, t, t2)?;
            let orders = self.ctx.orderings(self.data, n, t, t2, dim)?;
            match grads.as_deref_mut() {
                None => {
                    out[k] = s.ws.log_prob(&s.buf.b, &s.buf.r, &orders, eps, None)?;
                }
                Some(g) => {
                    out[k] = s.ws.log_prob(
                        &s.buf.b,
                        &s.buf.r,
                        &orders,
                        eps,
                        Some(SjGradient {
                            b: &mut s.gb,
                            r: &mut s.gr,
                        }),
                    )?;
                    s.gbeta.iter_mut().for_each(|v| *v = 0.0);
                    s.gl.iter_mut().for_each(|v| *v = 0.0);
                    self.engine.pair_adjoint(&mut s.buf, &s.gb, &s.gr, &mut s.gbeta, &mut s.gl);
                    let row = &mut g[k * d..(k + 1) * d];
                    row[..pb].copy_from_slice(&s.gbeta);
                    for (j, &(r, c)) in self.free_l.iter().enumerate() {
                        row[pb + j] = s.gl[r * q + c];
                    }
                    if row.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!("score of individual {n}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-pair log-likelihoods (`N x pairs`) and optionally gradients.
    fn run(&self, want_grad: bool) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let np = self.pairs.len();
        let d = self.spec.dim();
        let results: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..self.data.n_individuals())
            .into_par_iter()
            .map_init(
                || Scratch::new(self.data, self.spec),
                |s, n| {
                    let mut out = vec![0.0; np];
                    let mut g = if want_grad { vec![0.0; np * d] } else { Vec::new() };
                    self.individual(s, n, &mut out, if want_grad { Some(&mut g) } else { None })?;
                    Ok((out, g))
                },
            )
            .collect();
        let mut lls = Vec::with_capacity(self.data.n_individuals() * np);
        let mut grads = if want_grad { Some(Vec::with_capacity(lls.capacity() * d)) } else { None };
        for r in results {
            let (ll, g) = r?;
            lls.extend(ll);
            if let Some(gs) = grads.as_mut() {
                gs.extend(g);
            }
        }
        Ok((lls, grads))
    }
}

/// Log of the approximated joint probability of the observed choices on
/// occasions `t < t2` of individual `n`.
pub fn pair_loglik(
    data: &PanelDataset,
    n: usize,
    t: usize,
    t2: usize,
    theta: &[f64],
    spec: &ModelSpec,
    ctx: &CmlContext,
) -> Result<f64> {
    if n >= data.n_individuals() || t >= t2 || t2 >= data.n_occasions() {
        return Err(Error::InvalidArgument(format!("pair (n={n}, t={t}, t2={t2}) is not valid")));
    }
    let ev = Evaluator::new(data, theta, spec, ctx)?;
    let mut s = Scratch::new(data, spec);
    ev.engine.prepare_individual(&mut s.buf, n);
    ev.engine.pair(&mut s.buf, t, t2)?;
    let orders = ctx.orderings(data, n, t, t2, s.buf.dim)?;
    s.ws.log_prob(&s.buf.b, &s.buf.r, &orders, ctx.sj.clamp_epsilon, None)
}

/// Per-pair log-likelihood contributions, flat `N x pairs`.
pub fn pair_logliks(data: &PanelDataset, theta: &[f64], spec: &ModelSpec, ctx: &CmlContext) -> Result<Vec<f64>> {
    Ok(Evaluator::new(data, theta, spec, ctx)?.run(false)?.0)
}

/// Per-individual contributions `log cml_n`.
pub fn lcml_individuals(data: &PanelDataset, theta: &[f64], spec: &ModelSpec, ctx: &CmlContext) -> Result<Vec<f64>> {
    let np = data.n_pairs();
    let lls = pair_logliks(data, theta, spec, ctx)?;
    Ok(lls.chunks(np).map(|c| c.iter().sum()).collect())
}

/// Pairwise composite marginal log-likelihood.
pub fn lcml(data: &PanelDataset, theta: &[f64], spec: &ModelSpec, ctx: &CmlContext) -> Result<f64> {
    let v: f64 = lcml_individuals(data, theta, spec, ctx)?.iter().sum();
    if !v.is_finite() {
        return Err(Error::NonFinite("lcml".into()));
    }
    Ok(v)
}

/// `lcml` and its analytic gradient.
pub fn lcml_and_gradient(
    data: &PanelDataset,
    theta: &[f64],
    spec: &ModelSpec,
    ctx: &CmlContext,
) -> Result<(f64, Vec<f64>)> {
    let ev = Evaluator::new(data, theta, spec, ctx)?;
    let (lls, grads) = ev.run(true)?;
    let d = spec.dim();
    let np = data.n_pairs();
    let grads = grads.unwrap();
    let mut value = 0.0;
    let mut total = vec![0.0; d];
    for n in 0..data.n_individuals() {
        let mut ind = vec![0.0; d];
        for k in 0..np {
            value += lls[n * np + k];
            for (a, g) in ind.iter_mut().zip(&grads[(n * np + k) * d..(n * np + k + 1) * d]) {
                *a += g;
            }
        }
        for (t, a) in total.iter_mut().zip(&ind) {
            *t += a;
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("lcml".into()));
    }
    Ok((value, total))
}

/// Scores of every pair, every individual and the total at `theta`.
pub fn score(
    data: &PanelDataset,
    theta: &[f64],
    spec: &ModelSpec,
    ctx: &CmlContext,
    method: ScoreMethod,
) -> Result<ScoreSet> {
    let d = spec.dim();
    let np = data.n_pairs();
    let n = data.n_individuals();
    let per_pair = match method {
        ScoreMethod::Analytic => Evaluator::new(data, theta, spec, ctx)?.run(true)?.1.unwrap(),
        ScoreMethod::FiniteDifference => {
            let mut per_pair = vec![0.0; n * np * d];
            let mut th = theta.to_vec();
            for i in 0..d {
                let h = f64::EPSILON.sqrt() * theta[i].abs().max(1.0);
                th[i] = theta[i] + h;
                let up = pair_logliks(data, &th, spec, ctx)?;
                th[i] = theta[i] - h;
                let dn = pair_logliks(data, &th, spec, ctx)?;
                th[i] = theta[i];
                // the step actually taken, after rounding
                let width = (theta[i] + h) - (theta[i] - h);
                for (k, (u, l)) in up.iter().zip(&dn).enumerate() {
                    let v = (u - l) / width;
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!("finite-difference score, coordinate {i}")));
                    }
                    per_pair[k * d + i] = v;
                }
            }
            per_pair
        }
    };
    Ok(ScoreSet::from_pairs(per_pair, n, np, d))
}
