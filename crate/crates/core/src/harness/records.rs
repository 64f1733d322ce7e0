//! JSON records written by the command-line tool. Matrices are stored as
//! arrays of rows.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::averaging::{AveragingInput, AveragingOutcome};
use crate::estimation::{Fit, GodambeEstimates, Termination};
use crate::selection::{ICResult, TestResult};

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub names: Vec<String>,
    pub theta: Vec<f64>,
    /// Sandwich standard errors; zero for pinned coordinates.
    pub std_errors: Vec<f64>,
    pub lcml: f64,
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
    pub grad_norm: f64,
    pub n_individuals: usize,
    pub pinned: Vec<String>,
    /// `H` and `J` over the free coordinates, per individual.
    pub sensitivity: Vec<Vec<f64>>,
    pub variability: Vec<Vec<f64>>,
    pub information_criteria: Option<ICResult>,
}

impl FitRecord {
    /// `g` must be estimated over the fit's free coordinates.
    pub fn new(fit: &Fit, g: Option<&GodambeEstimates>, ic: Option<ICResult>) -> Self {
        let free = fit.free_indices();
        let mut se = vec![0.0; fit.theta_hat.len()];
        if let Some(gi) = g.and_then(|g| g.g_inverse().ok()) {
            let n = fit.n_individuals as f64;
            for (k, &i) in free.iter().enumerate() {
                se[i] = (gi[(k, k)].max(0.0) / n).sqrt();
            }
        }
        Self {
            names: fit.theta_hat.names.clone(),
            theta: fit.theta_hat.values.clone(),
            std_errors: se,
            lcml: fit.lcml_value,
            converged: fit.converged,
            termination: fit.termination,
            iterations: fit.n_iterations,
            grad_norm: fit.grad_norm,
            n_individuals: fit.n_individuals,
            pinned: fit.restriction.indices.iter().map(|&i| fit.theta_hat.names[i].clone()).collect(),
            sensitivity: g.map(|g| rows(&g.h)).unwrap_or_default(),
            variability: g.map(|g| rows(&g.j)).unwrap_or_default(),
            information_criteria: ic,
        }
    }
}

pub type TestRecord = TestResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageRecord {
    pub method: String,
    pub weights: Vec<f64>,
    pub names: Vec<String>,
    pub averaged_theta: Vec<f64>,
    pub focus_value: Option<f64>,
    pub rank_f: usize,
    pub min_eigen_f: f64,
    pub f: Vec<Vec<f64>>,
    pub delta_hat: Vec<f64>,
    pub information_criteria: Vec<ICResult>,
}

impl AverageRecord {
    pub fn new(out: &AveragingOutcome, input: &AveragingInput) -> Self {
        let p = &input.problem;
        Self {
            method: out.method.clone(),
            weights: out.weights.clone(),
            names: out.theta.names.clone(),
            averaged_theta: out.theta.values.clone(),
            focus_value: out.focus_value,
            rank_f: p.rank_f,
            min_eigen_f: p.min_eigen_f,
            f: rows(&p.f),
            delta_hat: p.delta_hat.iter().copied().collect(),
            information_criteria: input.ics.clone(),
        }
    }
}
