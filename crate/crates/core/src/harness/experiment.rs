//! Monte Carlo driver: replicated simulation, estimation of the wide and
//! narrow models, and aggregation of selection and averaging outcomes.

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{simulate_dataset, DgpConfig, DgpFamily};
use crate::averaging::{AveragingInput, AveragingRegistry, CandidateSet, Focus};
use crate::cml::{CmlContext, ScoreMethod};
use crate::error::{Error, Result};
use crate::estimation::{fit, Fit, FitOptions, SensitivityEstimator};
use crate::gauss::SjConfig;
use crate::model::{unpack, PanelDataset};
use crate::selection::{ComparisonOptions, NestedComparison, PenaltyScope, SelectionRegistry, Verdict};

fn default_reps() -> usize {
    200
}
fn default_level() -> f64 {
    0.05
}
fn default_five() -> usize {
    5
}
fn default_focus() -> usize {
    2
}

/// Replicated design over a grid of sample sizes and effect values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub family: DgpFamily,
    pub n_individuals: Vec<usize>,
    /// `beta` for variable selection, `alpha` for covariance structure.
    pub values: Vec<f64>,
    #[serde(default = "default_reps")]
    pub n_replications: usize,
    #[serde(default = "default_level")]
    pub nominal_level: f64,
    /// Selection and/or averaging method names.
    pub methods: Vec<String>,
    #[serde(default)]
    pub master_seed: u64,
    /// Worker threads; 0 uses the global pool.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_five")]
    pub n_occasions: usize,
    #[serde(default = "default_five")]
    pub n_alternatives: usize,
    #[serde(default)]
    pub sj: SjConfig,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub sensitivity: SensitivityEstimator,
    /// Coordinates covered by the information-criterion penalty.
    #[serde(default)]
    pub penalty: PenaltyScope,
    /// Coordinate whose estimation error the averaging methods report.
    #[serde(default = "default_focus")]
    pub focus_index: usize,
}

impl ExperimentConfig {
    pub fn new(family: DgpFamily, n_individuals: Vec<usize>, values: Vec<f64>, n_replications: usize, methods: &[&str]) -> Self {
        Self {
            name: String::new(),
            family,
            n_individuals,
            values,
            n_replications,
            nominal_level: 0.05,
            methods: methods.iter().map(|s| s.to_string()).collect(),
            master_seed: 0,
            threads: 0,
            n_occasions: 5,
            n_alternatives: 5,
            sj: SjConfig::default(),
            fit: FitOptions::default(),
            sensitivity: SensitivityEstimator::default(),
            penalty: PenaltyScope::default(),
            focus_index: 2,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_replications == 0 {
            return Err(Error::Config("n_replications must be at least 1".into()));
        }
        if self.n_individuals.is_empty() || self.values.is_empty() {
            return Err(Error::Config("n_individuals and values must be non-empty".into()));
        }
        if !(self.nominal_level > 0.0 && self.nominal_level < 1.0) {
            return Err(Error::Config(format!("nominal_level {} outside (0, 1)", self.nominal_level)));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        let (sel, avg) = (SelectionRegistry::default(), AveragingRegistry::default());
        for m in &self.methods {
            let m = canonical_method(m);
            if sel.get(&m).is_err() && avg.get(&m).is_err() {
                return Err(Error::Config(format!(
                    "unknown method '{m}' (selection: {}; averaging: {})",
                    sel.names().join(", "),
                    avg.names().join(", ")
                )));
            }
        }
        if self.focus_index >= 5 {
            return Err(Error::Config(format!("focus_index {} outside 0..5", self.focus_index)));
        }
        self.sj.validate()?;
        for c in self.cells() {
            c.dgp.validate()?;
        }
        Ok(())
    }

    /// Grid cells in `n_individuals`-major order.
    pub fn cells(&self) -> Vec<Cell> {
        let tag = match self.family {
            DgpFamily::Varsel => "beta",
            DgpFamily::Covstruct => "alpha",
        };
        let mut out = Vec::new();
        for &n in &self.n_individuals {
            for &v in &self.values {
                let mut dgp = match self.family {
                    DgpFamily::Varsel => DgpConfig::varsel(n, v, 0),
                    DgpFamily::Covstruct => DgpConfig::covstruct(n, v, 0),
                };
                dgp.n_occasions = self.n_occasions;
                dgp.n_alternatives = self.n_alternatives;
                let family = match self.family {
                    DgpFamily::Varsel => "varsel",
                    DgpFamily::Covstruct => "covstruct",
                };
                out.push(Cell {
                    id: format!("{family}_n{n}_{tag}{v}"),
                    dgp,
                });
            }
        }
        out
    }
}

/// Accepts the short aliases of the averaging methods.
pub fn canonical_method(name: &str) -> String {
    match name.to_ascii_lowercase().as_str() {
        "ic_avg" => "claic_avg".into(),
        "mse_avg" => "omse_avg".into(),
        other => other.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: String,
    pub dgp: DgpConfig,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Data seed of replication `rep`; shared by every cell of the grid.
pub fn replication_seed(master: u64, rep: usize) -> u64 {
    splitmix(splitmix(master) ^ splitmix(rep as u64 + 1))
}

/// Outcome of one method in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: String,
    /// Selection indicator (1 = larger model) or absolute focus error.
    pub value: Option<f64>,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub error: Option<String>,
}

/// Multiplier diagnostics of one empirical likelihood test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElDiagnostics {
    pub residual_restricted: f64,
    pub residual_unrestricted: f64,
    pub el_value_unrestricted: f64,
}

/// Averaging diagnostics of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragingDiagnostics {
    pub min_eigen_f: f64,
    pub max_abs_f: f64,
    pub rank_f: usize,
    pub omse_weight_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub cell_id: String,
    pub rep: usize,
    pub seed: u64,
    pub n_individuals: usize,
    /// Reason the replication was dropped, if it was.
    pub dropped: Option<String>,
    /// Smallest |L_kk| of the unrestricted fit; near zero the score
    /// covariance is close to singular.
    #[serde(default)]
    pub min_abs_l_diagonal: Option<f64>,
    pub clr: Option<f64>,
    pub el: Option<ElDiagnostics>,
    pub averaging: Option<AveragingDiagnostics>,
    pub methods: Vec<MethodRecord>,
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub cell_id: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub n_effective_reps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub replications: Vec<ReplicationRecord>,
}

impl ExperimentResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Value of `metric` for `method` in `cell_id`.
    pub fn get(&self, cell_id: &str, method: &str, metric: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.cell_id == cell_id && r.method == method && r.metric == metric)
    }
}

/// Wide and narrow fits of one simulated dataset, both started at the truth.
pub fn fit_pair(data: &PanelDataset, dgp: &DgpConfig, ctx: &CmlContext, opts: &FitOptions) -> Result<(Fit, Fit)> {
    let spec = dgp.model_spec();
    let start = dgp.true_theta();
    let wide = fit(data, &spec, &start, None, ctx, opts)?;
    wide.ensure_converged()?;
    let narrow = fit(data, &spec, &start, Some(&spec.narrow().restriction()), ctx, opts)?;
    narrow.ensure_converged()?;
    Ok((wide, narrow))
}

fn method_error(method: &str, e: &Error) -> MethodRecord {
    MethodRecord {
        method: method.to_string(),
        value: None,
        statistic: None,
        p_value: None,
        error: Some(e.to_string()),
    }
}

fn replicate(cfg: &ExperimentConfig, cell: &Cell, rep: usize) -> ReplicationRecord {
    let seed = replication_seed(cfg.master_seed, rep);
    let mut rec = ReplicationRecord {
        cell_id: cell.id.clone(),
        rep,
        seed,
        n_individuals: cell.dgp.n_individuals,
        dropped: None,
        min_abs_l_diagonal: None,
        clr: None,
        el: None,
        averaging: None,
        methods: Vec::new(),
    };
    let dgp = DgpConfig { seed, ..cell.dgp.clone() };
    let ctx = CmlContext::new(cfg.sj.clone(), splitmix(seed ^ 0x5eed));
    let prepared = simulate_dataset(&dgp).and_then(|data| {
        let (wide, narrow) = fit_pair(&data, &dgp, &ctx, &cfg.fit)?;
        Ok((data, wide, narrow))
    });
    let (data, wide, narrow) = match prepared {
        Ok(v) => v,
        Err(e) => {
            warn!("{} replication {rep} dropped: {e}", cell.id);
            rec.dropped = Some(e.to_string());
            return rec;
        }
    };
    rec.min_abs_l_diagonal = unpack(&wide.theta_hat.values, &wide.spec)
        .ok()
        .map(|(_, l)| l.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));

    let sel = SelectionRegistry::default();
    let avg = AveragingRegistry::default();
    let methods: Vec<String> = cfg.methods.iter().map(|m| canonical_method(m)).collect();
    let opts = ComparisonOptions {
        sensitivity: cfg.sensitivity,
        score_method: ScoreMethod::Analytic,
        penalty: cfg.penalty,
    };

    if methods.iter().any(|m| sel.get(m).is_ok()) {
        match NestedComparison::new(&data, &wide, &narrow, &opts) {
            Ok(cmp) => {
                rec.clr = Some(cmp.clr);
                for m in methods.iter().filter(|m| sel.get(m).is_ok()) {
                    rec.methods.push(match sel.get(m).unwrap().evaluate(&cmp) {
                        Ok(v) => {
                            let (statistic, p_value) = match &v {
                                Verdict::Test(t) => {
                                    if let [r, u] = t.el_states.as_slice() {
                                        rec.el = Some(ElDiagnostics {
                                            residual_restricted: r.residual,
                                            residual_unrestricted: u.residual,
                                            el_value_unrestricted: u.el_value,
                                        });
                                    }
                                    (Some(t.statistic), Some(t.p_value))
                                }
                                Verdict::Criterion { .. } => (None, None),
                            };
                            MethodRecord {
                                method: m.clone(),
                                value: Some(if v.prefers_larger(cfg.nominal_level) { 1.0 } else { 0.0 }),
                                statistic,
                                p_value,
                                error: None,
                            }
                        }
                        Err(e) => {
                            warn!("{} replication {rep}: {m} failed: {e}", cell.id);
                            method_error(m, &e)
                        }
                    });
                }
            }
            Err(e) => {
                warn!("{} replication {rep}: comparison failed: {e}", cell.id);
                for m in methods.iter().filter(|m| sel.get(m).is_ok()) {
                    rec.methods.push(method_error(m, &e));
                }
            }
        }
    }

    let avg_methods: Vec<&String> = methods.iter().filter(|m| avg.get(m).is_ok()).collect();
    if !avg_methods.is_empty() {
        let truth = dgp.true_theta().values[cfg.focus_index];
        let focus = Focus::Coordinate { index: cfg.focus_index };
        let input = CandidateSet::new(vec![narrow.clone(), wide.clone()])
            .and_then(|c| AveragingInput::new(&data, c, focus, &opts));
        match input {
            Ok(input) => {
                let p = &input.problem;
                rec.averaging = Some(AveragingDiagnostics {
                    min_eigen_f: p.min_eigen_f,
                    max_abs_f: p.f.amax(),
                    rank_f: p.rank_f,
                    omse_weight_sum: p.weights.iter().sum(),
                });
                for m in avg_methods {
                    rec.methods.push(match avg.apply(m, &input, &data) {
                        Ok(out) => MethodRecord {
                            method: m.clone(),
                            value: out.focus_value.map(|v| (v - truth).abs()),
                            statistic: out.focus_value,
                            p_value: None,
                            error: None,
                        },
                        Err(e) => method_error(m, &e),
                    });
                }
            }
            Err(e) => {
                warn!("{} replication {rep}: averaging failed: {e}", cell.id);
                for m in avg_methods {
                    rec.methods.push(method_error(m, &e));
                }
            }
        }
    }
    rec
}

fn metric_name(method: &str) -> &'static str {
    match method {
        "claic" | "clbic" => "larger_model_rate",
        m if AveragingRegistry::default().get(m).is_ok() => "mae",
        _ => "rejection_rate",
    }
}

fn aggregate(cfg: &ExperimentConfig, cells: &[Cell], reps: &[ReplicationRecord]) -> Vec<ResultRow> {
    let methods: Vec<String> = cfg.methods.iter().map(|m| canonical_method(m)).collect();
    let mut rows = Vec::new();
    for cell in cells {
        let recs: Vec<&ReplicationRecord> = reps.iter().filter(|r| r.cell_id == cell.id).collect();
        let kept: Vec<&&ReplicationRecord> = recs.iter().filter(|r| r.dropped.is_none()).collect();
        let row = |method: &str, metric: &str, value: f64, n: usize| ResultRow {
            cell_id: cell.id.clone(),
            method: method.to_string(),
            metric: metric.to_string(),
            value,
            n_effective_reps: n,
        };
        rows.push(row("fit", "dropped_replications", (recs.len() - kept.len()) as f64, kept.len()));
        for m in &methods {
            let vals: Vec<f64> = kept
                .iter()
                .filter_map(|r| r.methods.iter().find(|x| &x.method == m).and_then(|x| x.value))
                .collect();
            let mean = if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            rows.push(row(m, metric_name(m), mean, vals.len()));
            rows.push(row(m, "failures", (kept.len() - vals.len()) as f64, kept.len()));
        }
        let el: Vec<&ElDiagnostics> = kept.iter().filter_map(|r| r.el.as_ref()).collect();
        if !el.is_empty() {
            let res = el
                .iter()
                .map(|e| e.residual_restricted.max(e.residual_unrestricted))
                .fold(0.0, f64::max);
            let val = el.iter().map(|e| e.el_value_unrestricted).fold(f64::NEG_INFINITY, f64::max);
            rows.push(row("el", "max_psi_residual", res, el.len()));
            rows.push(row("el", "max_el_value_unrestricted_per_n", val / cell.dgp.n_individuals as f64, el.len()));
        }
        let av: Vec<&AveragingDiagnostics> = kept.iter().filter_map(|r| r.averaging.as_ref()).collect();
        if !av.is_empty() {
            let min_eig = av.iter().map(|a| a.min_eigen_f / a.max_abs_f.max(1.0)).fold(f64::INFINITY, f64::min);
            let wsum = av.iter().map(|a| (a.omse_weight_sum - 1.0).abs()).fold(0.0, f64::max);
            rows.push(row("omse_avg", "min_relative_eigen_f", min_eig, av.len()));
            rows.push(row("omse_avg", "max_weight_sum_error", wsum, av.len()));
        }
    }
    rows
}

/// Runs every replication of every cell. Replications run in parallel;
/// records and aggregates come out in a fixed order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let cells = cfg.cells();
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.n_replications).map(move |r| (c, r)))
        .collect();
    info!("{} cells x {} replications", cells.len(), cfg.n_replications);
    let run = || -> Vec<ReplicationRecord> {
        jobs.par_iter()
            .map(|&(c, r)| replicate(cfg, &cells[c], r))
            .collect()
    };
    let reps = if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run)
    } else {
        run()
    };
    let rows = aggregate(cfg, &cells, &reps);
    Ok(ExperimentResult { rows, replications: reps })
}
