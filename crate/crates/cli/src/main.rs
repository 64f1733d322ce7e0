use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use macml::averaging::{AveragingInput, AveragingRegistry, CandidateSet, Focus};
use macml::cml::{CmlContext, ScoreMethod};
use macml::estimation::{fit, godambe_at_fit, Fit, FitOptions, GodambeEstimates, SensitivityEstimator};
use macml::gauss::SjConfig;
use macml::harness::{run_experiment, simulate_dataset, AverageRecord, DgpConfig, ExperimentConfig, FitRecord};
use macml::model::{ModelSpec, PanelDataset};
use macml::selection::{information_criteria, ComparisonOptions, ICResult, NestedComparison, PenaltyScope, SelectionRegistry, Verdict};
use macml::{Error, Result};

#[derive(Parser)]
#[command(name = "macml", version, about = "Pairwise composite likelihood estimation, testing and averaging for mixed panel probit models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset from a design file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the design file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit one model.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        est: EstimationArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a model with a nested restriction of it.
    Test {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        unrestricted: PathBuf,
        #[arg(long)]
        restricted: PathBuf,
        /// clr, cclr1, cclr2, cclr3, cclr3_hh, el, claic or clbic.
        #[arg(long, default_value = "el")]
        method: String,
        #[arg(long, default_value_t = 0.05)]
        level: f64,
        #[command(flatten)]
        est: EstimationArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Information criteria of one model.
    Ic {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        est: EstimationArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average candidate models for a focus parameter.
    Average {
        #[arg(long)]
        data: PathBuf,
        /// Candidate model files; one must pin nothing.
        #[arg(long, num_args = 1.., required = true)]
        specs: Vec<PathBuf>,
        /// `coord:NAME`, `linear:c1,c2,...`, `set:NAME,NAME,...` or
        /// `pair:n,t,t2` (1-based).
        #[arg(long)]
        focus: String,
        /// claic_select, clbic_select, claic_avg, clbic_avg or omse_avg.
        #[arg(long, default_value = "omse_avg")]
        method: String,
        #[command(flatten)]
        est: EstimationArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte Carlo experiment.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Results CSV; standard output if absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-replication records as JSON.
        #[arg(long)]
        records: Option<PathBuf>,
        /// 500 replications per cell.
        #[arg(long)]
        full: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Args)]
struct EstimationArgs {
    /// Seed fixing the orderings of the approximation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random orderings averaged per pair.
    #[arg(long, default_value_t = 1)]
    permutations: usize,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    /// Sensitivity estimate: pairwise_outer or hessian.
    #[arg(long, default_value = "pairwise_outer")]
    sensitivity: String,
    /// Coordinates of the information-criterion penalty: all or free.
    #[arg(long, default_value = "all")]
    penalty: String,
}

impl EstimationArgs {
    fn context(&self) -> Result<CmlContext> {
        let sj = SjConfig {
            n_permutations: self.permutations,
            ..SjConfig::default()
        };
        sj.validate()?;
        Ok(CmlContext::new(sj, self.seed))
    }

    fn options(&self) -> FitOptions {
        FitOptions {
            max_iter: self.max_iter,
            ..FitOptions::default()
        }
    }

    fn sensitivity(&self) -> Result<SensitivityEstimator> {
        match self.sensitivity.as_str() {
            "pairwise_outer" => Ok(SensitivityEstimator::PairwiseOuter),
            "hessian" => Ok(SensitivityEstimator::Hessian),
            other => Err(Error::InvalidArgument(format!("unknown sensitivity estimate '{other}'"))),
        }
    }

    fn comparison(&self) -> Result<ComparisonOptions> {
        let penalty = match self.penalty.as_str() {
            "all" => PenaltyScope::AllCoordinates,
            "free" => PenaltyScope::FreeCoordinates,
            other => return Err(Error::InvalidArgument(format!("unknown penalty scope '{other}'"))),
        };
        Ok(ComparisonOptions {
            sensitivity: self.sensitivity()?,
            score_method: ScoreMethod::Analytic,
            penalty,
        })
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
        }
    }
    Ok(())
}

fn fit_spec(data: &PanelDataset, spec: &ModelSpec, est: &EstimationArgs) -> Result<Fit> {
    let start = spec.heuristic_start();
    let f = fit(data, spec, &start, Some(&spec.restriction()), &est.context()?, &est.options())?;
    info!(
        "fit: {} iterations, lcml {:.6}, gradient {:.2e}, {:?}",
        f.n_iterations, f.lcml_value, f.grad_norm, f.termination
    );
    f.ensure_converged()?;
    Ok(f)
}

fn parse_focus(text: &str, spec: &ModelSpec) -> Result<Focus> {
    let bad = || Error::InvalidArgument(format!("cannot parse focus '{text}'"));
    let (kind, rest) = text.split_once(':').ok_or_else(bad)?;
    let index = |name: &str| -> Result<usize> {
        let name = name.trim();
        if let Some(i) = spec.index_of(name) {
            return Ok(i);
        }
        match name.parse::<usize>() {
            Ok(i) if i >= 1 && i <= spec.dim() => Ok(i - 1),
            _ => Err(Error::InvalidArgument(format!(
                "unknown coordinate '{name}' (known: {})",
                spec.layout().join(", ")
            ))),
        }
    };
    match kind {
        "coord" => Ok(Focus::Coordinate { index: index(rest)? }),
        "set" => Ok(Focus::CoordSet {
            indices: rest.split(',').map(index).collect::<Result<_>>()?,
        }),
        "linear" => Ok(Focus::Linear {
            weights: rest
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?,
        }),
        "pair" => {
            let v: Vec<usize> = rest
                .split(',')
                .map(|v| v.trim().parse::<usize>().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            match v.as_slice() {
                [n, t, t2] if *n >= 1 && *t >= 1 && *t2 >= 1 => Ok(Focus::PairProbability {
                    individual: n - 1,
                    t: t - 1,
                    t2: t2 - 1,
                }),
                _ => Err(bad()),
            }
        }
        _ => Err(bad()),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { config, out, seed } => {
            let mut cfg: DgpConfig = toml::from_str(&std::fs::read_to_string(&config)?)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = simulate_dataset(&cfg)?;
            data.write_csv_path(&out)?;
            info!("wrote {} individuals to {}", data.n_individuals(), out.display());
        }
        Command::Fit { data, spec, est, out } => {
            let data = PanelDataset::read_csv_path(&data)?;
            let spec = ModelSpec::from_path(&spec)?;
            let f = fit_spec(&data, &spec, &est)?;
            let (g, ic) = godambe_and_ic(&data, &f, &est)?;
            emit(&FitRecord::new(&f, Some(&g), ic.ok()), out.as_deref())?;
        }
        Command::Test {
            data,
            unrestricted,
            restricted,
            method,
            level,
            est,
            out,
        } => {
            let reg = SelectionRegistry::default();
            let m = reg.get(&method)?;
            let data = PanelDataset::read_csv_path(&data)?;
            let fu = fit_spec(&data, &ModelSpec::from_path(&unrestricted)?, &est)?;
            let fr = fit_spec(&data, &ModelSpec::from_path(&restricted)?, &est)?;
            let cmp = NestedComparison::new(&data, &fu, &fr, &est.comparison()?)?;
            let verdict = m.evaluate(&cmp)?;
            #[derive(Serialize)]
            struct Record<'a> {
                #[serde(flatten)]
                verdict: &'a Verdict,
                prefers_larger: bool,
                level: f64,
            }
            emit(
                &Record {
                    verdict: &verdict,
                    prefers_larger: verdict.prefers_larger(level),
                    level,
                },
                out.as_deref(),
            )?;
        }
        Command::Ic { data, spec, est, out } => {
            let data = PanelDataset::read_csv_path(&data)?;
            let f = fit_spec(&data, &ModelSpec::from_path(&spec)?, &est)?;
            emit(&godambe_and_ic(&data, &f, &est)?.1?, out.as_deref())?;
        }
        Command::Average {
            data,
            specs,
            focus,
            method,
            est,
            out,
        } => {
            let reg = AveragingRegistry::default();
            reg.get(&method)?;
            let data = PanelDataset::read_csv_path(&data)?;
            let specs = specs.iter().map(|p| ModelSpec::from_path(p)).collect::<Result<Vec<_>>>()?;
            let focus = parse_focus(&focus, &specs[0])?;
            let fits = specs.iter().map(|s| fit_spec(&data, s, &est)).collect::<Result<Vec<_>>>()?;
            let input = AveragingInput::new(&data, CandidateSet::new(fits)?, focus, &est.comparison()?)?;
            let outcome = reg.apply(&method, &input, &data)?;
            emit(&AverageRecord::new(&outcome, &input), out.as_deref())?;
        }
        Command::Experiment {
            config,
            out,
            records,
            full,
            threads,
        } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if full {
                cfg.n_replications = 500;
            }
            if let Some(t) = threads {
                cfg.threads = t;
            }
            let res = run_experiment(&cfg)?;
            match out {
                Some(p) => res.write_csv_path(&p)?,
                None => res.write_csv(std::io::stdout().lock())?,
            }
            if let Some(p) = records {
                std::fs::write(p, serde_json::to_string_pretty(&res.replications)? + "\n")?;
            }
        }
    }
    Ok(())
}

/// Godambe estimates over the fit's free coordinates, and the information
/// criteria over the configured penalty coordinates.
fn godambe_and_ic(data: &PanelDataset, f: &Fit, est: &EstimationArgs) -> Result<(GodambeEstimates, Result<ICResult>)> {
    let opts = est.comparison()?;
    let (_, g) = godambe_at_fit(data, f, opts.sensitivity, opts.score_method)?;
    let ic = g.restrict_to(&opts.penalty.indices(f)).and_then(|p| information_criteria(f, &p));
    Ok((g.restrict_to(&f.free_indices())?, ic))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
