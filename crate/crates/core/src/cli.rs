//! Command-line front end: configuration, CSV ingestion and report output.
//!
//! Each subcommand reads one JSON config (flags override scalar fields) and
//! writes `<out>/report.json`, plus `<out>/rows.csv` and `<out>/sweep.csv`
//! where it has tabular output. Failures print `{"code", "message"}` to
//! stderr and exit with 2 for configuration problems, 1 otherwise.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Observation};
use crate::distribution::{
    pathwise_derivative_check, CheckReport, Estimand, FiniteDistribution, DEFAULT_STEP_GRID,
};
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimateReport, EstimatorKind, FitPlan};
use crate::learners::{fit_nuisance, LearnerKind, LearnerSpec, NuisanceSpecs, NuisanceTruth};
use crate::montecarlo::{
    run_coverage, run_dr_consistency, run_rate_experiment, run_replications, CoverageSummary,
    DgpSpec, DrArm, DrCurve, EstimatorConfig, FailedReplication, RateFitSummary, ReplicationResult,
};
use crate::vonmises::{
    decompose_error, remainder_exact_psi, remainder_exact_theta, remainder_rate_sweep,
    DecompositionReport, RemainderReport, SweepReport,
};

pub const DEFAULT_SEED: u64 = 20240601;
pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Parser)]
#[command(
    name = "eifkit",
    version,
    about = "EIF-based one-step estimation and its diagnostics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Estimate,
    VerifyEif,
    Decompose,
    Remainder,
    Simulate,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate psi or theta from a CSV file or simulated data.
    Estimate(Flags),
    /// Compare pathwise derivatives with EIF averages on a finite law.
    VerifyEif(Flags),
    /// Four-term von Mises decomposition of the plug-in error.
    Decompose(Flags),
    /// Exact remainder identities, or a remainder rate sweep.
    Remainder(Flags),
    /// Replication experiments on a simulated DGP.
    Simulate(Flags),
}

impl Command {
    fn split(&self) -> (CommandKind, &Flags) {
        match self {
            Command::Estimate(f) => (CommandKind::Estimate, f),
            Command::VerifyEif(f) => (CommandKind::VerifyEif, f),
            Command::Decompose(f) => (CommandKind::Decompose, f),
            Command::Remainder(f) => (CommandKind::Remainder, f),
            Command::Simulate(f) => (CommandKind::Simulate, f),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Flags {
    /// JSON experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    /// Plain replications; any number of reps.
    Replications,
    Coverage,
    Rate,
    Dr,
}

/// The JSON config document. Exactly one of `csv`, `distribution` and `dgp`
/// names the data source; relative paths resolve against the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Option<CommandKind>,
    pub csv: Option<PathBuf>,
    pub distribution: Option<PathBuf>,
    pub dgp: Option<DgpSpec>,
    pub direction: Option<PathBuf>,
    pub estimand: Option<Estimand>,
    pub estimator: Option<EstimatorKind>,
    pub learners: Option<NuisanceSpecs>,
    pub folds: Option<usize>,
    pub level: Option<f64>,
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub n_grid: Option<Vec<usize>>,
    pub reps: Option<usize>,
    pub experiment: Option<Experiment>,
    pub arm: Option<DrArm>,
    pub step_grid: Option<Vec<f64>>,
    pub pn_a: Option<f64>,
    pub include_eif: Option<bool>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.csv,
            &mut cfg.distribution,
            &mut cfg.direction,
            &mut cfg.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn apply_flags(&mut self, flags: &Flags) {
        if let Some(out) = &flags.out {
            self.out = Some(out.clone());
        }
        if let Some(seed) = flags.seed {
            self.seed = Some(seed);
        }
        if let Some(w) = flags.workers {
            self.workers = Some(w);
        }
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    fn level(&self) -> f64 {
        self.level.unwrap_or(DEFAULT_LEVEL)
    }

    fn learners(&self) -> NuisanceSpecs {
        self.learners.clone().unwrap_or_else(|| {
            NuisanceSpecs::new(
                LearnerSpec::new(LearnerKind::LinearOls),
                LearnerSpec::new(LearnerKind::LogisticIrls),
            )
        })
    }

    fn estimands(&self) -> Vec<Estimand> {
        match self.estimand {
            Some(e) => vec![e],
            None => vec![Estimand::Psi, Estimand::Theta],
        }
    }

    /// Static checks that need no computation.
    pub fn validate(&self, command: CommandKind) -> Result<()> {
        let cfg_err = |m: &str| Err(Error::Config(m.to_string()));
        if let Some(c) = self.command {
            if c != command {
                return Err(Error::Config(format!(
                    "config is for {c:?} but {command:?} was requested"
                )));
            }
        }
        let sources = [
            self.csv.is_some(),
            self.distribution.is_some(),
            self.dgp.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count();
        if sources != 1 {
            return cfg_err("exactly one of csv, distribution and dgp must be given");
        }
        for p in [&self.csv, &self.distribution, &self.direction]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if let Some(dgp) = &self.dgp {
            dgp.validate()?;
        }
        if let Some(l) = &self.learners {
            l.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(level) = self.level {
            if !(level > 0.0 && level < 1.0) {
                return cfg_err("level must lie in (0, 1)");
            }
        }
        if self.folds == Some(0) {
            return cfg_err("folds must be at least 1");
        }
        if self.workers == Some(0) {
            return cfg_err("workers must be at least 1");
        }
        if self.n == Some(0) {
            return cfg_err("n must be positive");
        }
        if let Some(grid) = &self.n_grid {
            if grid.is_empty() || grid.contains(&0) {
                return cfg_err("n_grid needs positive sizes");
            }
        }
        if let Some(pn) = self.pn_a {
            if !(pn > 0.0 && pn <= 1.0) {
                return cfg_err("pn_a must lie in (0, 1]");
            }
        }
        match command {
            CommandKind::Estimate => {
                if self.csv.is_none() && self.n.is_none() {
                    return cfg_err("estimate needs a csv, or n rows to draw");
                }
                if self.estimand == Some(Estimand::Theta)
                    && self.estimator == Some(EstimatorKind::Ipw)
                {
                    return cfg_err("the IPW estimator is only defined for psi");
                }
            }
            CommandKind::VerifyEif => {
                if self.distribution.is_none() {
                    return cfg_err("verify-eif needs a distribution");
                }
            }
            CommandKind::Decompose => {
                if self.csv.is_some() {
                    return cfg_err("decompose needs a known truth (distribution or dgp)");
                }
                if self.n.is_none() {
                    return cfg_err("decompose needs a sample size n");
                }
            }
            CommandKind::Remainder => {
                if self.csv.is_some() {
                    return cfg_err("remainder needs a known truth (distribution or dgp)");
                }
                if self.n_grid.is_none() && self.n.is_none() {
                    return cfg_err("remainder needs n (single check) or n_grid (sweep)");
                }
            }
            CommandKind::Simulate => {
                if self.dgp.is_none() {
                    return cfg_err("simulate needs a dgp");
                }
                let exp = self.experiment.unwrap_or(Experiment::Replications);
                match exp {
                    Experiment::Rate | Experiment::Dr => {
                        if self.n_grid.is_none() {
                            return cfg_err("rate and dr experiments need n_grid");
                        }
                    }
                    Experiment::Replications | Experiment::Coverage => {
                        if self.n.is_none() {
                            return cfg_err("simulate needs n");
                        }
                    }
                }
                if exp == Experiment::Dr && self.arm.is_none() {
                    return cfg_err("dr experiment needs an arm");
                }
            }
        }
        Ok(())
    }
}

/// Reads a CSV with covariate columns prefixed `w`, a 0/1 column `a` and an
/// outcome column `y`. Other columns are ignored; rows are numbered from 1.
pub fn ingest_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let a_col = find("a")?;
    let y_col = find("y")?;
    let w_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with('w'))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    if w_cols.is_empty() {
        return Err(Error::MissingColumn("w".into()));
    }
    let number = |row: usize, column: &str, raw: &str| -> Result<f64> {
        raw.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::UnparseableNumber {
                row,
                column: column.to_string(),
                value: raw.to_string(),
            })
    };
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let field = |c: usize| record.get(c).unwrap_or("");
        let raw_a = field(a_col);
        let a = match raw_a.trim().parse::<f64>() {
            Ok(0.0) => 0,
            Ok(1.0) => 1,
            _ => {
                return Err(Error::NonBinaryTreatment {
                    row,
                    value: raw_a.to_string(),
                })
            }
        };
        let y = number(row, "y", field(y_col))?;
        let w = w_cols
            .iter()
            .map(|(c, name)| number(row, name, field(*c)))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(Observation { w, a, y });
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Dataset::with_names(rows, w_cols.into_iter().map(|(_, n)| n).collect())
}

/// Writes `data` in the ingestion format, with shortest round-trip floats.
pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = data.covariate_names().iter().map(String::as_str).collect();
    header.extend(["a", "y"]);
    w.write_record(&header)?;
    for r in data {
        let mut rec: Vec<String> = r.w.iter().map(|v| v.to_string()).collect();
        rec.push(r.a.to_string());
        rec.push(r.y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join("report.json"), text)?;
    Ok(())
}

fn write_table(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One line per attempted replication, ordered by `(n, rep)`; failed ones
/// carry their error code and empty estimates.
fn replication_table(
    path: &Path,
    rows: &[ReplicationResult],
    failures: &[FailedReplication],
) -> Result<()> {
    let mut lines: Vec<((usize, usize), Vec<String>)> = rows
        .iter()
        .map(|r| {
            let line = vec![
                r.rep.to_string(),
                r.n.to_string(),
                r.point.to_string(),
                opt(r.variance),
                opt(r.covered),
                r.scaled_error.to_string(),
                String::new(),
            ];
            ((r.n, r.rep), line)
        })
        .collect();
    lines.extend(failures.iter().map(|f| {
        let mut line = vec![f.rep.to_string(), f.n.to_string()];
        line.extend(std::iter::repeat_n(String::new(), 4));
        line.push(f.code.clone());
        ((f.n, f.rep), line)
    }));
    lines.sort_by_key(|(key, _)| *key);
    write_table(
        path,
        &[
            "rep",
            "n",
            "point",
            "var",
            "covered",
            "scaled_error",
            "error",
        ],
        lines.into_iter().map(|(_, line)| line),
    )
}

#[derive(Serialize)]
struct EstimateOutput {
    command: CommandKind,
    seed: u64,
    estimate: EstimateReport,
}

#[derive(Serialize)]
struct VerifyOutput {
    command: CommandKind,
    direction: String,
    checks: Vec<CheckReport>,
    max_discrepancy: f64,
}

#[derive(Serialize)]
struct DecomposeOutput {
    command: CommandKind,
    seed: u64,
    learners: NuisanceSpecs,
    decompositions: Vec<DecompositionReport>,
}

#[derive(Serialize)]
struct RemainderOutput {
    command: CommandKind,
    seed: u64,
    learners: NuisanceSpecs,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    remainders: Vec<RemainderReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    sweeps: Vec<SweepReport>,
}

#[derive(Serialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
enum SimulateSummary {
    Replications { truth: f64, completed: usize },
    Coverage { summary: CoverageSummary },
    Rate { summary: RateFitSummary },
    Dr { curve: DrCurve },
}

#[derive(Serialize)]
struct SimulateOutput {
    command: CommandKind,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    estimator: Option<EstimatorConfig>,
    #[serde(flatten)]
    summary: SimulateSummary,
    failures: Vec<FailedReplication>,
}

/// The law used as truth by `decompose` and `remainder`.
fn truth_law(cfg: &ExperimentConfig) -> Result<FiniteDistribution> {
    match (&cfg.distribution, &cfg.dgp) {
        (Some(p), _) => FiniteDistribution::load(p),
        (None, Some(dgp)) => dgp.truth_distribution(),
        _ => Err(Error::Config("no truth source".into())),
    }
}

fn run_estimate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let seed = cfg.seed();
    let (data, truth): (Dataset, Option<Arc<dyn NuisanceTruth>>) = if let Some(path) = &cfg.csv {
        (ingest_csv(path)?, None)
    } else if let Some(dgp) = &cfg.dgp {
        let n = cfg.n.expect("validated");
        (dgp.generate(n, seed)?, Some(Arc::new(dgp.clone())))
    } else {
        let p = FiniteDistribution::load(cfg.distribution.as_ref().expect("validated"))?;
        let n = cfg.n.expect("validated");
        let data = p.sample(n, &mut ChaCha8Rng::seed_from_u64(seed))?;
        (data, Some(Arc::new(p)))
    };
    let plan = FitPlan {
        specs: cfg.learners(),
        folds: cfg.folds.unwrap_or(DEFAULT_FOLDS),
        seed,
        level: cfg.level(),
        truth,
    };
    let mut report = estimate(
        &data,
        cfg.estimand.unwrap_or(Estimand::Psi),
        cfg.estimator.unwrap_or(EstimatorKind::Onestep),
        &plan,
    )?;
    if !cfg.include_eif.unwrap_or(false) {
        report.eif_values.clear();
    }
    write_json(
        out,
        &EstimateOutput {
            command: CommandKind::Estimate,
            seed,
            estimate: report,
        },
    )
}

fn run_verify(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let base = FiniteDistribution::load(cfg.distribution.as_ref().expect("validated"))?;
    let steps = cfg
        .step_grid
        .clone()
        .unwrap_or_else(|| DEFAULT_STEP_GRID.to_vec());
    // without an explicit direction, check every atom's point mass
    let directions: Vec<(String, FiniteDistribution)> = match &cfg.direction {
        Some(p) => vec![(p.display().to_string(), FiniteDistribution::load(p)?)],
        None => base
            .atoms()
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let d = FiniteDistribution::new(vec![crate::distribution::Atom {
                    obs: a.obs.clone(),
                    mass: 1.0,
                }])?;
                Ok((format!("atom:{i}"), d))
            })
            .collect::<Result<_>>()?,
    };
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for est in cfg.estimands() {
        for (name, dir) in &directions {
            let r = pathwise_derivative_check(est, &base, dir, &steps)?;
            rows.push(vec![
                name.clone(),
                est.to_string(),
                r.finite_difference.to_string(),
                r.eif_integral.to_string(),
                r.discrepancy.to_string(),
            ]);
            checks.push(r);
        }
    }
    write_table(
        &out.join("rows.csv"),
        &[
            "direction",
            "estimand",
            "finite_difference",
            "eif_integral",
            "discrepancy",
        ],
        rows,
    )?;
    let max_discrepancy = checks.iter().map(|c| c.discrepancy).fold(0.0, f64::max);
    let direction = match &cfg.direction {
        Some(_) => "file".to_string(),
        None => "atom point masses".to_string(),
    };
    write_json(
        out,
        &VerifyOutput {
            command: CommandKind::VerifyEif,
            direction,
            checks,
            max_discrepancy,
        },
    )
}

/// Nuisances for `decompose` / `remainder`: oracle learners use the truth
/// law, everything else is fit on `sample`.
fn nuisances_on(
    p: &FiniteDistribution,
    specs: &NuisanceSpecs,
    sample: &Dataset,
) -> Result<crate::learners::FittedNuisance> {
    let truth: Arc<dyn NuisanceTruth> = Arc::new(p.clone());
    fit_nuisance(sample, specs, Some(&truth), sample.n())
}

fn run_decompose(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let seed = cfg.seed();
    let p = truth_law(cfg)?;
    let sample = p.sample(
        cfg.n.expect("validated"),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    let specs = cfg.learners();
    let nuis = nuisances_on(&p, &specs, &sample)?;
    let decompositions = cfg
        .estimands()
        .into_iter()
        .map(|est| decompose_error(&p, &nuis, &sample, est))
        .collect::<Result<Vec<_>>>()?;
    write_table(
        &out.join("rows.csv"),
        &[
            "estimand",
            "n",
            "clt",
            "drift",
            "empirical_process",
            "remainder",
            "total",
        ],
        decompositions.iter().map(|d| {
            vec![
                d.estimand.to_string(),
                d.n.to_string(),
                d.clt_term.to_string(),
                d.drift_term.to_string(),
                d.empirical_process_term.to_string(),
                d.remainder.to_string(),
                d.total_error.to_string(),
            ]
        }),
    )?;
    write_json(
        out,
        &DecomposeOutput {
            command: CommandKind::Decompose,
            seed,
            learners: specs,
            decompositions,
        },
    )
}

fn run_remainder(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let seed = cfg.seed();
    let p = truth_law(cfg)?;
    let specs = cfg.learners();
    let mut output = RemainderOutput {
        command: CommandKind::Remainder,
        seed,
        learners: specs.clone(),
        remainders: Vec::new(),
        sweeps: Vec::new(),
    };
    if let Some(grid) = &cfg.n_grid {
        let mut rows = Vec::new();
        for est in cfg.estimands() {
            let sweep = remainder_rate_sweep(&p, &specs, grid, est)?;
            for pt in &sweep.points {
                rows.push(vec![
                    est.to_string(),
                    pt.n.to_string(),
                    pt.remainder.to_string(),
                    pt.cs_bound.to_string(),
                ]);
            }
            output.sweeps.push(sweep);
        }
        write_table(
            &out.join("sweep.csv"),
            &["estimand", "n", "remainder", "bound"],
            rows,
        )?;
    } else {
        let sample = p.sample(
            cfg.n.expect("validated"),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )?;
        let nuis = nuisances_on(&p, &specs, &sample)?;
        for est in cfg.estimands() {
            output.remainders.push(match est {
                Estimand::Psi => remainder_exact_psi(&p, &nuis)?,
                Estimand::Theta => {
                    let pn = cfg.pn_a.unwrap_or(p.pr_treated());
                    remainder_exact_theta(&p, &nuis, pn)?
                }
            });
        }
    }
    write_json(out, &output)
}

fn run_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let seed = cfg.seed();
    let dgp = cfg.dgp.as_ref().expect("validated");
    let reps = cfg.reps.unwrap_or(100);
    let est_cfg = EstimatorConfig {
        estimand: cfg.estimand.unwrap_or(Estimand::Psi),
        estimator: cfg.estimator.unwrap_or(EstimatorKind::Onestep),
        specs: cfg.learners(),
        folds: cfg.folds.unwrap_or(DEFAULT_FOLDS),
        level: cfg.level(),
    };
    let experiment = cfg.experiment.unwrap_or(Experiment::Replications);
    let (summary, rows, failures, estimator) = match experiment {
        Experiment::Replications => {
            let b = run_replications(dgp, &est_cfg, cfg.n.expect("validated"), reps, seed)?;
            let s = SimulateSummary::Replications {
                truth: b.truth,
                completed: b.rows.len(),
            };
            (s, b.rows, b.failures, Some(est_cfg))
        }
        Experiment::Coverage => {
            let r = run_coverage(dgp, &est_cfg, cfg.n.expect("validated"), reps, seed)?;
            (
                SimulateSummary::Coverage { summary: r.summary },
                r.rows,
                r.failures,
                Some(est_cfg),
            )
        }
        Experiment::Rate => {
            let grid = cfg.n_grid.as_ref().expect("validated");
            let r = run_rate_experiment(dgp, &est_cfg, grid, reps, seed)?;
            write_table(
                &out.join("sweep.csv"),
                &["n", "rmse", "bias", "var_scaled_error"],
                r.summary.points.iter().map(|p| {
                    vec![
                        p.n.to_string(),
                        p.rmse.to_string(),
                        p.bias.to_string(),
                        p.var_scaled_error.to_string(),
                    ]
                }),
            )?;
            (
                SimulateSummary::Rate { summary: r.summary },
                r.rows,
                r.failures,
                Some(est_cfg),
            )
        }
        Experiment::Dr => {
            let grid = cfg.n_grid.as_ref().expect("validated");
            let r = run_dr_consistency(dgp, cfg.arm.expect("validated"), grid, reps, seed)?;
            write_table(
                &out.join("sweep.csv"),
                &["n", "bias", "mc_standard_error"],
                r.curve.points.iter().map(|p| {
                    vec![
                        p.n.to_string(),
                        p.bias.to_string(),
                        p.mc_standard_error.to_string(),
                    ]
                }),
            )?;
            (
                SimulateSummary::Dr { curve: r.curve },
                r.rows,
                r.failures,
                None,
            )
        }
    };
    replication_table(&out.join("rows.csv"), &rows, &failures)?;
    write_json(
        out,
        &SimulateOutput {
            command: CommandKind::Simulate,
            seed,
            estimator,
            summary,
            failures,
        },
    )
}

/// Failure of a CLI run, with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub exit_code: i32,
    pub error: Error,
}

impl Failure {
    fn config(error: Error) -> Self {
        // configuration-stage errors are reported as config errors
        let error = match error {
            Error::Config(_) => error,
            other => Error::Config(other.to_string()),
        };
        Failure {
            exit_code: 2,
            error,
        }
    }

    fn runtime(error: Error) -> Self {
        Failure {
            exit_code: 1,
            error,
        }
    }

    /// `{"code": ..., "message": ...}`
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "code": self.error.code(),
            "message": self.error.to_string(),
        })
        .to_string()
    }
}

/// Loads and validates the config, then runs the subcommand.
pub fn run(command: CommandKind, flags: &Flags) -> std::result::Result<PathBuf, Failure> {
    let mut cfg = match &flags.config {
        Some(path) => ExperimentConfig::from_path(path).map_err(Failure::config)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_flags(flags);
    cfg.validate(command).map_err(Failure::config)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(|e| Failure::runtime(e.into()))?;

    let job = || match command {
        CommandKind::Estimate => run_estimate(&cfg, &out),
        CommandKind::VerifyEif => run_verify(&cfg, &out),
        CommandKind::Decompose => run_decompose(&cfg, &out),
        CommandKind::Remainder => run_remainder(&cfg, &out),
        CommandKind::Simulate => run_simulate(&cfg, &out),
    };
    let result = match cfg.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Failure::config(Error::Config(e.to_string())))?
            .install(job),
        None => job(),
    };
    result.map_err(Failure::runtime)?;
    Ok(out)
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let (command, flags) = cli.command.split();
    match run(command, flags) {
        Ok(_) => 0,
        Err(f) => {
            let mut stderr = std::io::stderr().lock();
            let _ = writeln!(stderr, "{}", f.to_json());
            f.exit_code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn ingest_examples() {
        let dir = tempfile::tempdir().unwrap();
        let ok = write(dir.path(), "ok.csv", "w1,a,y\n0,0,1\n1,1,2\n");
        let data = ingest_csv(&ok).unwrap();
        assert_eq!(data.n(), 2);
        assert_eq!(data.rows()[1].w, vec![1.0]);

        let bad = write(dir.path(), "bad.csv", "w1,a,y\n0,0,1\n1,2,2\n");
        match ingest_csv(&bad) {
            Err(Error::NonBinaryTreatment { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }

        let empty = write(dir.path(), "empty.csv", "w1,a,y\n");
        assert!(matches!(ingest_csv(&empty), Err(Error::EmptyDataset)));

        let missing = write(dir.path(), "missing.csv", "w1,y\n0,1\n");
        assert!(matches!(ingest_csv(&missing), Err(Error::MissingColumn(c)) if c == "a"));

        let garbled = write(dir.path(), "garbled.csv", "w1,w2,a,y\n0,x,0,1\n");
        match ingest_csv(&garbled) {
            Err(Error::UnparseableNumber { row, column, .. }) => {
                assert_eq!((row, column.as_str()), (1, "w2"))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let src = write(
            dir.path(),
            "in.csv",
            "w1,w2,a,y\n0.1,-3,0,1.0000000000000002\n1e-7,2.5,1,-0.3333333333333333\n",
        );
        let data = ingest_csv(&src).unwrap();
        let dst = dir.path().join("out.csv");
        write_csv(&data, &dst).unwrap();
        assert_eq!(ingest_csv(&dst).unwrap(), data);
    }

    #[test]
    fn config_needs_one_source() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.validate(CommandKind::Estimate).is_err());
        let cfg = ExperimentConfig {
            dgp: Some(DgpSpec::default()),
            csv: Some("x.csv".into()),
            ..Default::default()
        };
        assert!(cfg.validate(CommandKind::Estimate).is_err());
    }

    #[test]
    fn unknown_config_field_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"nn": 3}"#).is_err());
    }
}
