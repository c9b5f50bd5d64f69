//! Synthetic data with known truths and replication experiments.
//!
//! Every experiment is a pure function of its configuration and a master
//! seed: replication `r` at sample size `n` draws from its own ChaCha8
//! stream seeded by a hash of `(master_seed, n, r)`, so results do not depend
//! on thread count or scheduling, and extending `reps` keeps earlier
//! replications unchanged.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{CovKey, Dataset, Observation};
use crate::distribution::{Atom, Estimand, FiniteDistribution};
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorKind, FitPlan};
use crate::learners::{LearnerKind, LearnerSpec, NuisanceSpecs, NuisanceTruth};
use crate::quadrature::uniform_cube;
use crate::vonmises::log_log_slope;

/// Largest covariate dimension for which quadrature truths are computed.
pub const MAX_QUADRATURE_DIM: usize = 6;

/// Ratio `max / min` of `var(sqrt(n) error)` across a rate grid below which
/// the scaled variance counts as stable.
pub const STABILITY_RATIO: f64 = 1.5;

/// One cell of a discrete covariate law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub w: Vec<f64>,
    /// `Pr(W = w)`
    pub pw: f64,
    /// `Pr(A = 0 | W = w)`
    pub g: f64,
    /// `E(Y | W = w, A = 0)`
    pub q: f64,
}

/// A data-generating process with closed-form nuisances.
///
/// Potential outcomes are `Y^0 = q(W) + sd * e0` and `Y^1 = q(W) + 1 + sd * e1`
/// with independent standard normal noise, and the observed outcome is
/// `Y = Y^A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DgpSpec {
    /// `W ~ U[-1, 1]^d`, `g(w) = expit(gamma_0 + gamma' w)`,
    /// `q(w) = beta_0 + beta' w`.
    LogisticLinear {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        noise_sd: f64,
    },
    /// `W` on a finite table of cells.
    DiscreteSaturated { cells: Vec<Cell>, noise_sd: f64 },
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec::LogisticLinear {
            gamma: vec![0.0, 0.8, -0.8],
            beta: vec![1.0, 1.0, 0.5],
            noise_sd: 1.0,
        }
    }
}

fn expit(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn affine(coef: &[f64], w: &[f64]) -> f64 {
    coef[0] + coef[1..].iter().zip(w).map(|(c, x)| c * x).sum::<f64>()
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self {
            DgpSpec::LogisticLinear {
                gamma,
                beta,
                noise_sd,
            } => {
                if gamma.is_empty() || gamma.len() != beta.len() {
                    return bad("gamma and beta need equal length d + 1 >= 1".into());
                }
                if gamma.len() - 1 > MAX_QUADRATURE_DIM {
                    return bad(format!(
                        "at most {MAX_QUADRATURE_DIM} covariates are supported"
                    ));
                }
                if gamma.iter().chain(beta).any(|v| !v.is_finite()) {
                    return bad("coefficients must be finite".into());
                }
                if !(*noise_sd >= 0.0 && noise_sd.is_finite()) {
                    return bad(format!("noise_sd {noise_sd} must be >= 0"));
                }
            }
            DgpSpec::DiscreteSaturated { cells, noise_sd } => {
                if cells.is_empty() {
                    return bad("no cells".into());
                }
                let d = cells[0].w.len();
                let mut total = 0.0;
                let mut seen = std::collections::HashSet::new();
                for c in cells {
                    if c.w.len() != d || c.w.iter().any(|v| !v.is_finite()) {
                        return bad("cells need finite covariates of one dimension".into());
                    }
                    if !seen.insert(CovKey::new(&c.w)) {
                        return bad(format!("duplicate cell {:?}", c.w));
                    }
                    if !(c.pw > 0.0 && c.g > 0.0 && c.g < 1.0 && c.q.is_finite()) {
                        return bad(format!("cell {:?} needs pw > 0 and g in (0, 1)", c.w));
                    }
                    total += c.pw;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return bad(format!("cell masses sum to {total}"));
                }
                if !(*noise_sd >= 0.0 && noise_sd.is_finite()) {
                    return bad(format!("noise_sd {noise_sd} must be >= 0"));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            DgpSpec::LogisticLinear { gamma, .. } => gamma.len() - 1,
            DgpSpec::DiscreteSaturated { cells, .. } => cells[0].w.len(),
        }
    }

    fn cell(&self, w: &[f64]) -> Option<&Cell> {
        match self {
            DgpSpec::DiscreteSaturated { cells, .. } => {
                let key = CovKey::new(w);
                cells.iter().find(|c| CovKey::new(&c.w) == key)
            }
            DgpSpec::LogisticLinear { .. } => None,
        }
    }

    /// Quadrature (or exact cell) law with the DGP's `W` marginal, `g` and
    /// `q`: atoms `(w, 0, q(w))` and `(w, 1, q(w) + 1)`. Its `psi`, `theta`
    /// and nuisances are those of the DGP.
    pub fn truth_distribution(&self) -> Result<FiniteDistribution> {
        self.validate()?;
        let support: Vec<(Vec<f64>, f64)> = match self {
            DgpSpec::LogisticLinear { .. } => {
                let d = self.dim();
                let nodes = match d {
                    0..=2 => 64,
                    3 => 24,
                    _ => 10,
                };
                uniform_cube(d, nodes)
            }
            DgpSpec::DiscreteSaturated { cells, .. } => {
                cells.iter().map(|c| (c.w.clone(), c.pw)).collect()
            }
        };
        let mut atoms = Vec::with_capacity(2 * support.len());
        for (w, p) in support {
            let (g, q) = (NuisanceTruth::g(self, &w), NuisanceTruth::q(self, &w));
            if p * g > 0.0 {
                atoms.push(Atom::new(w.clone(), 0, q, p * g));
            }
            if p * (1.0 - g) > 0.0 {
                atoms.push(Atom::new(w, 1, q + 1.0, p * (1.0 - g)));
            }
        }
        // masses are exact products of rule weights; renormalise rounding
        let total: f64 = atoms.iter().map(|a| a.mass).sum();
        for a in &mut atoms {
            a.mass /= total;
        }
        FiniteDistribution::new(atoms)
    }

    /// The true estimand value. `psi` is closed form for the logistic-linear
    /// model (`E[W] = 0`); everything else goes through
    /// [`truth_distribution`](Self::truth_distribution).
    pub fn truth(&self, estimand: Estimand) -> Result<f64> {
        self.validate()?;
        match (self, estimand) {
            (DgpSpec::LogisticLinear { beta, .. }, Estimand::Psi) => Ok(beta[0]),
            _ => self.truth_distribution()?.functional(estimand),
        }
    }

    /// `E[g(W)] = Pr(A = 0)`.
    pub fn expected_g(&self) -> Result<f64> {
        let dist = self.truth_distribution()?;
        Ok(1.0 - dist.pr_treated())
    }

    /// `n` iid rows together with the untreated potential outcomes `Y^0`.
    pub fn generate_with_counterfactuals(
        &self,
        n: usize,
        seed: u64,
    ) -> Result<(Dataset, Vec<f64>)> {
        self.validate()?;
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.dim();
        let cumulative: Vec<f64> = match self {
            DgpSpec::DiscreteSaturated { cells, .. } => cells
                .iter()
                .scan(0.0, |acc, c| {
                    *acc += c.pw;
                    Some(*acc)
                })
                .collect(),
            DgpSpec::LogisticLinear { .. } => Vec::new(),
        };
        let sd = match self {
            DgpSpec::LogisticLinear { noise_sd, .. }
            | DgpSpec::DiscreteSaturated { noise_sd, .. } => *noise_sd,
        };
        let mut rows = Vec::with_capacity(n);
        let mut y0s = Vec::with_capacity(n);
        for _ in 0..n {
            let w: Vec<f64> = match self {
                DgpSpec::LogisticLinear { .. } => {
                    (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
                }
                DgpSpec::DiscreteSaturated { cells, .. } => {
                    let u = rng.random::<f64>() * cumulative[cumulative.len() - 1];
                    let idx = cumulative.partition_point(|&c| c <= u).min(cells.len() - 1);
                    cells[idx].w.clone()
                }
            };
            let u: f64 = rng.random();
            let e0: f64 = rng.sample(StandardNormal);
            let e1: f64 = rng.sample(StandardNormal);
            let q = NuisanceTruth::q(self, &w);
            let a = if u < NuisanceTruth::g(self, &w) { 0 } else { 1 };
            let y0 = q + sd * e0;
            let y1 = q + 1.0 + sd * e1;
            y0s.push(y0);
            rows.push(Observation {
                w,
                a,
                y: if a == 0 { y0 } else { y1 },
            });
        }
        Ok((Dataset::new(rows)?, y0s))
    }

    /// `n` iid rows, deterministic in `(self, n, seed)`.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        Ok(self.generate_with_counterfactuals(n, seed)?.0)
    }
}

impl NuisanceTruth for DgpSpec {
    fn q(&self, w: &[f64]) -> f64 {
        match self {
            DgpSpec::LogisticLinear { beta, .. } => affine(beta, w),
            DgpSpec::DiscreteSaturated { .. } => self.cell(w).map_or(f64::NAN, |c| c.q),
        }
    }

    fn g(&self, w: &[f64]) -> f64 {
        match self {
            DgpSpec::LogisticLinear { gamma, .. } => expit(affine(gamma, w)),
            DgpSpec::DiscreteSaturated { .. } => self.cell(w).map_or(f64::NAN, |c| c.g),
        }
    }

    fn median_w1(&self) -> f64 {
        match self {
            DgpSpec::LogisticLinear { .. } => 0.0,
            DgpSpec::DiscreteSaturated { cells, .. } => {
                let mut marg: Vec<(f64, f64)> = cells
                    .iter()
                    .map(|c| (c.w.first().copied().unwrap_or(0.0), c.pw))
                    .collect();
                marg.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut acc = 0.0;
                for &(w1, p) in &marg {
                    acc += p;
                    if acc >= 0.5 - 1e-12 {
                        return w1;
                    }
                }
                marg[marg.len() - 1].0
            }
        }
    }
}

/// splitmix64 finaliser.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `rep` at sample size `n`.
pub fn rep_seed(master_seed: u64, n: usize, rep: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master_seed) ^ n as u64) ^ rep as u64)
}

/// How each replication estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub estimand: Estimand,
    pub estimator: EstimatorKind,
    pub specs: NuisanceSpecs,
    /// `1` for full-sample nuisances, `K >= 2` to cross-fit.
    pub folds: usize,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub rep: usize,
    pub n: usize,
    pub point: f64,
    pub variance: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub covered: Option<bool>,
    /// `sqrt(n) (point - truth)`
    pub scaled_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedReplication {
    pub rep: usize,
    pub n: usize,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationBatch {
    pub truth: f64,
    pub rows: Vec<ReplicationResult>,
    pub failures: Vec<FailedReplication>,
}

fn run_one(
    dgp: &DgpSpec,
    truth_fns: &Arc<dyn NuisanceTruth>,
    cfg: &EstimatorConfig,
    truth: f64,
    n: usize,
    rep: usize,
    master_seed: u64,
) -> Result<ReplicationResult> {
    let seed = rep_seed(master_seed, n, rep);
    let data = dgp.generate(n, seed)?;
    let plan = FitPlan {
        specs: cfg.specs.clone(),
        folds: cfg.folds,
        seed: splitmix64(seed),
        level: cfg.level,
        truth: Some(truth_fns.clone()),
    };
    let report = estimate(&data, cfg.estimand, cfg.estimator, &plan)?;
    Ok(ReplicationResult {
        rep,
        n,
        point: report.point,
        variance: report.variance,
        ci_low: report.ci_low,
        ci_high: report.ci_high,
        covered: report.covers(truth),
        scaled_error: (n as f64).sqrt() * (report.point - truth),
    })
}

fn validate_config(dgp: &DgpSpec, cfg: &EstimatorConfig) -> Result<()> {
    dgp.validate()?;
    cfg.specs.validate()?;
    if cfg.folds == 0 {
        return Err(Error::Config("folds must be at least 1".into()));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::Config(format!("level {} outside (0, 1)", cfg.level)));
    }
    if cfg.estimator == EstimatorKind::Ipw && cfg.estimand == Estimand::Theta {
        return Err(Error::Config(
            "the IPW estimator is only defined for psi".into(),
        ));
    }
    Ok(())
}

/// `reps` independent replications at sample size `n`. Replications that
/// fail (for instance a fold without untreated rows) are recorded, not fatal.
pub fn run_replications(
    dgp: &DgpSpec,
    cfg: &EstimatorConfig,
    n: usize,
    reps: usize,
    master_seed: u64,
) -> Result<ReplicationBatch> {
    validate_config(dgp, cfg)?;
    if n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    let truth = dgp.truth(cfg.estimand)?;
    let truth_fns: Arc<dyn NuisanceTruth> = Arc::new(dgp.clone());
    let outcomes: Vec<std::result::Result<ReplicationResult, FailedReplication>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            run_one(dgp, &truth_fns, cfg, truth, n, rep, master_seed).map_err(|e| {
                FailedReplication {
                    rep,
                    n,
                    code: e.code().to_string(),
                    message: e.to_string(),
                }
            })
        })
        .collect();
    let mut rows = Vec::with_capacity(reps);
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => rows.push(r),
            Err(f) => failures.push(f),
        }
    }
    Ok(ReplicationBatch {
        truth,
        rows,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub n: usize,
    pub reps: usize,
    pub failures: usize,
    pub truth: f64,
    pub coverage: Option<f64>,
    /// `sqrt(p (1 - p) / reps)`
    pub mc_standard_error: Option<f64>,
    pub mean_point: f64,
    pub mean_scaled_error: f64,
    pub var_scaled_error: f64,
    pub skewness: Option<f64>,
    pub excess_kurtosis: Option<f64>,
    /// Mean of `n * V_hat`, the variance of the reference normal.
    pub mean_n_variance: Option<f64>,
    pub ks_distance: Option<f64>,
    /// Asymptotic 1% critical value of the one-sample KS statistic.
    pub ks_critical_1pct: f64,
    pub ks_flag: Option<bool>,
}

impl CoverageSummary {
    pub fn from_batch(batch: &ReplicationBatch, n: usize) -> Self {
        let rows = &batch.rows;
        let m = rows.len();
        let mf = m as f64;
        let errors: Vec<f64> = rows.iter().map(|r| r.scaled_error).collect();
        let mean = errors.iter().sum::<f64>() / mf;
        let centred = |k: i32| errors.iter().map(|e| (e - mean).powi(k)).sum::<f64>() / mf;
        let (m2, m3, m4) = (centred(2), centred(3), centred(4));
        let var = if m > 1 { m2 * mf / (mf - 1.0) } else { 0.0 };
        let (skewness, excess_kurtosis) = if m2 > 0.0 {
            (Some(m3 / m2.powf(1.5)), Some(m4 / (m2 * m2) - 3.0))
        } else {
            (None, None)
        };

        let covered: Vec<bool> = rows.iter().filter_map(|r| r.covered).collect();
        let (coverage, mc_se) = if covered.is_empty() {
            (None, None)
        } else {
            let p = covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64;
            (Some(p), Some((p * (1.0 - p) / covered.len() as f64).sqrt()))
        };

        let n_vars: Vec<f64> = rows
            .iter()
            .filter_map(|r| r.variance.map(|v| v * r.n as f64))
            .collect();
        let mean_n_variance =
            (!n_vars.is_empty()).then(|| n_vars.iter().sum::<f64>() / n_vars.len() as f64);
        let ks_distance = mean_n_variance
            .filter(|&s2| s2 > 0.0)
            .map(|s2| ks_against_normal(&errors, s2.sqrt()));
        let ks_critical_1pct = 1.62762 / mf.sqrt();

        CoverageSummary {
            n,
            reps: m + batch.failures.len(),
            failures: batch.failures.len(),
            truth: batch.truth,
            coverage,
            mc_standard_error: mc_se,
            mean_point: rows.iter().map(|r| r.point).sum::<f64>() / mf,
            mean_scaled_error: mean,
            var_scaled_error: var,
            skewness,
            excess_kurtosis,
            mean_n_variance,
            ks_distance,
            ks_critical_1pct,
            ks_flag: ks_distance.map(|d| d > ks_critical_1pct),
        }
    }
}

/// `sup_x |F_m(x) - Phi(x / sd)|`.
pub fn ks_against_normal(values: &[f64], sd: f64) -> f64 {
    let normal = Normal::new(0.0, sd).expect("positive sd");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / m).abs().max(((i + 1) as f64 / m - f).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRun {
    pub summary: CoverageSummary,
    pub rows: Vec<ReplicationResult>,
    pub failures: Vec<FailedReplication>,
}

/// Coverage and normality of the scaled errors over `reps >= 100` draws.
pub fn run_coverage(
    dgp: &DgpSpec,
    cfg: &EstimatorConfig,
    n: usize,
    reps: usize,
    master_seed: u64,
) -> Result<CoverageRun> {
    if reps < 100 {
        return Err(Error::Config(format!(
            "coverage needs reps >= 100, got {reps}"
        )));
    }
    let batch = run_replications(dgp, cfg, n, reps, master_seed)?;
    Ok(CoverageRun {
        summary: CoverageSummary::from_batch(&batch, n),
        rows: batch.rows,
        failures: batch.failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: usize,
    pub completed: usize,
    pub rmse: f64,
    pub bias: f64,
    /// Sample variance of `sqrt(n) (point - truth)`.
    pub var_scaled_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFitSummary {
    pub estimator: EstimatorKind,
    pub points: Vec<RatePoint>,
    /// Slope of `log RMSE` on `log n`.
    pub slope: Option<f64>,
    /// `max / min` of the scaled-error variances across the grid.
    pub var_ratio: Option<f64>,
    pub stable: bool,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRun {
    pub summary: RateFitSummary,
    pub rows: Vec<ReplicationResult>,
    pub failures: Vec<FailedReplication>,
}

fn check_grid(n_grid: &[usize], min_span: f64) -> Result<()> {
    if n_grid.len() < 2 || n_grid.contains(&0) {
        return Err(Error::Config(
            "n_grid needs at least two positive sizes".into(),
        ));
    }
    let lo = *n_grid.iter().min().expect("nonempty") as f64;
    let hi = *n_grid.iter().max().expect("nonempty") as f64;
    if (hi / lo).log10() < min_span {
        return Err(Error::Config(format!(
            "n_grid must span at least {min_span} orders of magnitude"
        )));
    }
    Ok(())
}

/// RMSE of one estimator across `n_grid`, with its log-log slope.
pub fn run_rate_experiment(
    dgp: &DgpSpec,
    cfg: &EstimatorConfig,
    n_grid: &[usize],
    reps: usize,
    master_seed: u64,
) -> Result<RateRun> {
    check_grid(n_grid, 1.5)?;
    let mut points = Vec::with_capacity(n_grid.len());
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &n in n_grid {
        let batch = run_replications(dgp, cfg, n, reps, master_seed)?;
        let m = batch.rows.len() as f64;
        let errs: Vec<f64> = batch.rows.iter().map(|r| r.point - batch.truth).collect();
        let bias = errs.iter().sum::<f64>() / m;
        let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / m).sqrt();
        let scaled: Vec<f64> = batch.rows.iter().map(|r| r.scaled_error).collect();
        let sm = scaled.iter().sum::<f64>() / m;
        let var = scaled.iter().map(|s| (s - sm).powi(2)).sum::<f64>() / (m - 1.0);
        points.push(RatePoint {
            n,
            completed: batch.rows.len(),
            rmse,
            bias,
            var_scaled_error: var,
        });
        rows.extend(batch.rows);
        failures.extend(batch.failures);
    }
    let xs: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.rmse).collect();
    let slope = log_log_slope(&xs, &ys);
    let vars: Vec<f64> = points.iter().map(|p| p.var_scaled_error).collect();
    let vmax = vars.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let vmin = vars.iter().copied().fold(f64::INFINITY, f64::min);
    let var_ratio = (vmin > 0.0).then(|| vmax / vmin);
    Ok(RateRun {
        summary: RateFitSummary {
            estimator: cfg.estimator,
            points,
            slope,
            var_ratio,
            stable: var_ratio.is_some_and(|r| r <= STABILITY_RATIO),
            failures: failures.len(),
        },
        rows,
        failures,
    })
}

/// Which nuisance the doubly robust experiment gets wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DrArm {
    None,
    QWrong,
    GWrong,
    BothWrong,
}

impl DrArm {
    /// Correct learners are OLS for `q` and logistic IRLS for `g`, both well
    /// specified under the logistic-linear DGP; the wrong ones drop the first
    /// covariate.
    pub fn specs(self) -> NuisanceSpecs {
        let right_q = LearnerSpec::new(LearnerKind::LinearOls);
        let right_g = LearnerSpec::new(LearnerKind::LogisticIrls);
        let wrong = LearnerSpec::new(LearnerKind::MisspecifiedOmit);
        match self {
            DrArm::None => NuisanceSpecs::new(right_q, right_g),
            DrArm::QWrong => NuisanceSpecs::new(wrong, right_g),
            DrArm::GWrong => NuisanceSpecs::new(right_q, wrong),
            DrArm::BothWrong => NuisanceSpecs::new(wrong.clone(), wrong),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrPoint {
    pub n: usize,
    pub completed: usize,
    pub bias: f64,
    /// `sd(point) / sqrt(completed)`
    pub mc_standard_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrCurve {
    pub arm: DrArm,
    pub truth: f64,
    pub points: Vec<DrPoint>,
    /// Relative change of `|bias|` between the two largest sizes.
    pub plateau_change: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrRun {
    pub curve: DrCurve,
    pub rows: Vec<ReplicationResult>,
    pub failures: Vec<FailedReplication>,
}

/// Bias of the full-sample one-step estimator of `psi` when one, both or
/// neither nuisance is misspecified.
pub fn run_dr_consistency(
    dgp: &DgpSpec,
    arm: DrArm,
    n_grid: &[usize],
    reps: usize,
    master_seed: u64,
) -> Result<DrRun> {
    check_grid(n_grid, 0.0)?;
    if reps < 2 {
        return Err(Error::Config("need at least two replications".into()));
    }
    let cfg = EstimatorConfig {
        estimand: Estimand::Psi,
        estimator: EstimatorKind::Onestep,
        specs: arm.specs(),
        folds: 1,
        level: 0.95,
    };
    let mut sorted = n_grid.to_vec();
    sorted.sort_unstable();
    let mut points = Vec::with_capacity(sorted.len());
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut truth = f64::NAN;
    for &n in &sorted {
        let batch = run_replications(dgp, &cfg, n, reps, master_seed)?;
        truth = batch.truth;
        let m = batch.rows.len() as f64;
        let errs: Vec<f64> = batch.rows.iter().map(|r| r.point - batch.truth).collect();
        let bias = errs.iter().sum::<f64>() / m;
        let var = errs.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / (m - 1.0);
        points.push(DrPoint {
            n,
            completed: batch.rows.len(),
            bias,
            mc_standard_error: (var / m).sqrt(),
        });
        rows.extend(batch.rows);
        failures.extend(batch.failures);
    }
    let plateau_change = match points.as_slice() {
        [.., a, b] => {
            let (x, y) = (a.bias.abs(), b.bias.abs());
            let scale = x.max(y);
            (scale > 0.0).then(|| (x - y).abs() / scale)
        }
        _ => None,
    };
    Ok(DrRun {
        curve: DrCurve {
            arm,
            truth,
            points,
            plateau_change,
            failures: failures.len(),
        },
        rows,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle_cfg(c: f64) -> EstimatorConfig {
        EstimatorConfig {
            estimand: Estimand::Psi,
            estimator: EstimatorKind::Onestep,
            specs: NuisanceSpecs::new(
                LearnerSpec::oracle(0.25, c, 0),
                LearnerSpec::oracle(0.25, c, 0),
            ),
            folds: 1,
            level: 0.95,
        }
    }

    #[test]
    fn noiseless_untreated_rows_follow_q() {
        let dgp = DgpSpec::LogisticLinear {
            gamma: vec![0.0, 0.8, -0.8],
            beta: vec![1.0, 1.0, 0.5],
            noise_sd: 0.0,
        };
        let data = dgp.generate(200, 5).unwrap();
        for r in data.iter().filter(|r| r.untreated()) {
            assert_eq!(r.y, NuisanceTruth::q(&dgp, &r.w));
        }
        assert_eq!(data, dgp.generate(200, 5).unwrap());
        assert_ne!(data, dgp.generate(200, 6).unwrap());
    }

    #[test]
    fn counterfactuals_match_untreated_outcomes() {
        let dgp = DgpSpec::default();
        let (data, y0) = dgp.generate_with_counterfactuals(300, 1).unwrap();
        for (r, y) in data.iter().zip(&y0) {
            if r.untreated() {
                assert_eq!(r.y, *y);
            }
        }
    }

    #[test]
    fn quadrature_truths() {
        let dgp = DgpSpec::default();
        // psi = beta_0; by symmetry of W and gamma_1 = -gamma_2, E[g] = 1/2
        let dist = dgp.truth_distribution().unwrap();
        assert!((dist.psi().unwrap() - 1.0).abs() < 1e-12);
        assert!((dgp.expected_g().unwrap() - 0.5).abs() < 1e-12);
        let theta = dgp.truth(Estimand::Theta).unwrap();
        // independent 2-d midpoint rule at fine resolution
        let m = 800;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..m {
            for j in 0..m {
                let w = [
                    -1.0 + (i as f64 + 0.5) * 2.0 / m as f64,
                    -1.0 + (j as f64 + 0.5) * 2.0 / m as f64,
                ];
                let g = NuisanceTruth::g(&dgp, &w);
                num += (1.0 - g) * NuisanceTruth::q(&dgp, &w);
                den += 1.0 - g;
            }
        }
        assert!((theta - num / den).abs() < 1e-5, "{theta} vs {}", num / den);
    }

    #[test]
    fn rep_seeds_are_distinct_and_stable() {
        let a = rep_seed(1, 500, 0);
        assert_eq!(a, rep_seed(1, 500, 0));
        assert_ne!(a, rep_seed(1, 500, 1));
        assert_ne!(a, rep_seed(1, 501, 0));
        assert_ne!(a, rep_seed(2, 500, 0));
    }

    #[test]
    fn doubling_reps_keeps_prefix() {
        let dgp = DgpSpec::default();
        let a = run_replications(&dgp, &oracle_cfg(0.0), 50, 8, 9).unwrap();
        let b = run_replications(&dgp, &oracle_cfg(0.0), 50, 16, 9).unwrap();
        assert_eq!(a.rows[..], b.rows[..8]);
    }

    #[test]
    fn constant_outcome_gives_zero_width_intervals() {
        let dgp = DgpSpec::LogisticLinear {
            gamma: vec![0.0, 0.8, -0.8],
            beta: vec![2.0, 0.0, 0.0],
            noise_sd: 0.0,
        };
        let run = run_coverage(&dgp, &oracle_cfg(0.0), 40, 100, 3).unwrap();
        assert_eq!(run.summary.coverage, Some(1.0));
        for r in &run.rows {
            assert_eq!(r.ci_low, r.ci_high);
            assert_eq!(r.covered, Some(true));
        }
    }

    #[test]
    fn coverage_requires_100_reps() {
        assert!(run_coverage(&DgpSpec::default(), &oracle_cfg(0.0), 40, 99, 3).is_err());
    }

    #[test]
    fn ks_distance_of_perfect_quantiles() {
        let normal = Normal::new(0.0, 2.0).unwrap();
        let m = 1000;
        let v: Vec<f64> = (0..m)
            .map(|i| normal.inverse_cdf((i as f64 + 0.5) / m as f64))
            .collect();
        assert!((ks_against_normal(&v, 2.0) - 0.5 / m as f64).abs() < 1e-9);
    }

    #[test]
    fn dgp_json() {
        let dgp: DgpSpec = serde_json::from_str(
            r#"{"kind":"discrete-saturated","noise_sd":0.5,"cells":[{"w":[0.0],"pw":0.4,"g":0.5,"q":1.0},{"w":[1.0],"pw":0.6,"g":0.3,"q":2.0}]}"#,
        )
        .unwrap();
        dgp.validate().unwrap();
        assert_eq!(NuisanceTruth::median_w1(&dgp), 1.0);
        let theta = dgp.truth(Estimand::Theta).unwrap();
        let want = (0.4 * 0.5 * 1.0 + 0.6 * 0.7 * 2.0) / (0.4 * 0.5 + 0.6 * 0.7);
        assert!((theta - want).abs() < 1e-12);
        assert!(serde_json::from_str::<DgpSpec>(
            r#"{"kind":"logistic-linear","gamma":[0],"beta":[1],"noise_sd":1,"extra":1}"#
        )
        .is_err());
    }
}
