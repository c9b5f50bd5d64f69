//! Plug-in, IPW and one-step estimators of `psi` and `theta`, K-fold
//! cross-fitting, and EIF-based variance and confidence intervals.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::distribution::Estimand;
use crate::error::{Error, Result};
use crate::learners::{fit_nuisance, FittedNuisance, NuisanceSpecs, NuisanceTruth, Predict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Plugin,
    Ipw,
    Onestep,
}

/// Assignment of rows to cross-fitting folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    /// Shuffles `0..n` with a seeded ChaCha8 stream and deals rows to folds
    /// round-robin, so fold sizes differ by at most one.
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!(
                "cross-fitting needs K >= 2, got {k}"
            )));
        }
        if k > n {
            return Err(Error::Config(format!(
                "K = {k} exceeds the sample size {n}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut assignment = vec![0; n];
        for (pos, &row) in order.iter().enumerate() {
            assignment[row] = pos % k;
        }
        Ok(FoldPlan {
            n,
            k,
            seed,
            assignment,
        })
    }

    /// Row indices in fold `fold`, ascending.
    pub fn fold(&self, fold: usize) -> Vec<usize> {
        (0..self.n)
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    /// Row indices outside fold `fold`, ascending.
    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.n)
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimand: Estimand,
    pub estimator: EstimatorKind,
    pub n: usize,
    pub point: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eif_values: Vec<f64>,
    pub variance: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub level: Option<f64>,
    pub fold_plan: Option<FoldPlan>,
    pub nuisance_specs: Option<NuisanceSpecs>,
}

impl EstimateReport {
    fn bare(estimand: Estimand, estimator: EstimatorKind, n: usize, point: f64) -> Self {
        EstimateReport {
            estimand,
            estimator,
            n,
            point,
            eif_values: Vec::new(),
            variance: None,
            ci_low: None,
            ci_high: None,
            level: None,
            fold_plan: None,
            nuisance_specs: None,
        }
    }

    /// `ci_low <= truth <= ci_high`, if there is an interval.
    pub fn covers(&self, truth: f64) -> Option<bool> {
        Some(self.ci_low? <= truth && truth <= self.ci_high?)
    }
}

/// g-computation: `(1/n) sum q_hat(W_i)`.
pub fn plugin_psi(data: &Dataset, qhat: &dyn Predict) -> f64 {
    data.iter().map(|r| qhat.predict(&r.w)).sum::<f64>() / data.n() as f64
}

/// Horvitz-Thompson: `(1/n) sum I(A_i=0) Y_i / g_hat(W_i)`.
pub fn ipw_psi(data: &Dataset, ghat: &dyn Predict) -> f64 {
    data.iter()
        .filter(|r| r.untreated())
        .map(|r| r.y / ghat.predict(&r.w))
        .sum::<f64>()
        / data.n() as f64
}

/// Plug-in for `theta`: mean of `q_hat` over treated rows.
pub fn plugin_theta(data: &Dataset, qhat: &dyn Predict) -> Result<f64> {
    let (sum, count) = data
        .iter()
        .filter(|r| r.treated())
        .fold((0.0, 0usize), |(s, c), r| (s + qhat.predict(&r.w), c + 1));
    if count == 0 {
        return Err(Error::NoTreatedRows);
    }
    Ok(sum / count as f64)
}

/// `V = (1/n^2) sum phi_i^2` and the normal interval `point +- z sqrt(V)`.
pub fn variance_and_ci(eif_values: &[f64], point: f64, level: f64) -> Result<(f64, f64, f64)> {
    if eif_values.is_empty() {
        return Err(Error::EmptyEif);
    }
    let z = normal_quantile(level)?;
    let n = eif_values.len() as f64;
    let variance = eif_values.iter().map(|v| v * v).sum::<f64>() / (n * n);
    let half = z * variance.sqrt();
    Ok((variance, point - half, point + half))
}

/// `z_{(1+level)/2}`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("level {level} outside (0, 1)")));
    }
    Ok(Normal::standard().inverse_cdf(0.5 + level / 2.0))
}

/// One-step estimate from per-row predictions `q_i = q_hat(W_i)` and
/// truncated `g_i = g_hat(W_i)`. `theta` uses `P_n(A)` of `data`.
pub fn onestep_from_predictions(
    data: &Dataset,
    estimand: Estimand,
    q: &[f64],
    g: &[f64],
    level: f64,
) -> Result<EstimateReport> {
    let n = data.n();
    let nf = n as f64;
    let (point, eif_values) = match estimand {
        Estimand::Psi => {
            let contrib: Vec<f64> = data
                .iter()
                .zip(q.iter().zip(g))
                .map(|(r, (&qi, &gi))| {
                    let residual = if r.untreated() { (r.y - qi) / gi } else { 0.0 };
                    residual + qi
                })
                .collect();
            let point = contrib.iter().sum::<f64>() / nf;
            (point, contrib.iter().map(|c| c - point).collect::<Vec<_>>())
        }
        Estimand::Theta => {
            let pn = data.treated_fraction();
            if pn <= 0.0 {
                return Err(Error::NoTreatedRows);
            }
            let residual: Vec<f64> = data
                .iter()
                .zip(q.iter().zip(g))
                .map(|(r, (&qi, &gi))| {
                    if r.untreated() {
                        (1.0 - gi) / gi * (r.y - qi) / pn
                    } else {
                        0.0
                    }
                })
                .collect();
            let point = data
                .iter()
                .zip(q.iter().zip(&residual))
                .map(|(r, (&qi, &ri))| if r.treated() { qi / pn } else { ri })
                .sum::<f64>()
                / nf;
            let eif = data
                .iter()
                .zip(q.iter().zip(&residual))
                .map(|(r, (&qi, &ri))| if r.treated() { (qi - point) / pn } else { ri })
                .collect();
            (point, eif)
        }
    };
    let (variance, lo, hi) = variance_and_ci(&eif_values, point, level)?;
    Ok(EstimateReport {
        eif_values,
        variance: Some(variance),
        ci_low: Some(lo),
        ci_high: Some(hi),
        level: Some(level),
        ..EstimateReport::bare(estimand, EstimatorKind::Onestep, n, point)
    })
}

fn predictions(data: &Dataset, nuis: &FittedNuisance) -> (Vec<f64>, Vec<f64>) {
    data.iter()
        .map(|r| (nuis.predict_q(&r.w), nuis.predict_g(&r.w)))
        .unzip()
}

/// `psi_os = P_n{ I(A=0)/g_hat (Y - q_hat) + q_hat }`.
pub fn onestep_psi(data: &Dataset, nuis: &FittedNuisance, level: f64) -> Result<EstimateReport> {
    let (q, g) = predictions(data, nuis);
    let mut report = onestep_from_predictions(data, Estimand::Psi, &q, &g, level)?;
    report.nuisance_specs = nuis.specs.clone();
    Ok(report)
}

/// `theta_os = P_n{ I(A=0)/P_n(A) (1-g_hat)/g_hat (Y - q_hat) + I(A=1)/P_n(A) q_hat }`.
pub fn onestep_theta(data: &Dataset, nuis: &FittedNuisance, level: f64) -> Result<EstimateReport> {
    let (q, g) = predictions(data, nuis);
    let mut report = onestep_from_predictions(data, Estimand::Theta, &q, &g, level)?;
    report.nuisance_specs = nuis.specs.clone();
    Ok(report)
}

pub fn onestep(
    data: &Dataset,
    estimand: Estimand,
    nuis: &FittedNuisance,
    level: f64,
) -> Result<EstimateReport> {
    match estimand {
        Estimand::Psi => onestep_psi(data, nuis, level),
        Estimand::Theta => onestep_theta(data, nuis, level),
    }
}

/// Any of the three estimators with nuisances already fitted. IPW exists for
/// `psi` only.
pub fn estimate_with(
    data: &Dataset,
    estimand: Estimand,
    estimator: EstimatorKind,
    nuis: &FittedNuisance,
    level: f64,
) -> Result<EstimateReport> {
    let n = data.n();
    let mut report = match (estimator, estimand) {
        (EstimatorKind::Onestep, _) => return onestep(data, estimand, nuis, level),
        (EstimatorKind::Plugin, Estimand::Psi) => EstimateReport::bare(
            estimand,
            estimator,
            n,
            plugin_psi(data, nuis.outcome().as_ref()),
        ),
        (EstimatorKind::Plugin, Estimand::Theta) => EstimateReport::bare(
            estimand,
            estimator,
            n,
            plugin_theta(data, nuis.outcome().as_ref())?,
        ),
        (EstimatorKind::Ipw, Estimand::Psi) => {
            let g = |w: &[f64]| nuis.predict_g(w);
            EstimateReport::bare(estimand, estimator, n, ipw_psi(data, &g))
        }
        (EstimatorKind::Ipw, Estimand::Theta) => {
            return Err(Error::Config(
                "the IPW estimator is only defined for psi".into(),
            ))
        }
    };
    report.nuisance_specs = nuis.specs.clone();
    Ok(report)
}

/// Settings shared by full-sample and cross-fitted estimation.
#[derive(Clone)]
pub struct FitPlan {
    pub specs: NuisanceSpecs,
    /// `1` fits nuisances on the full sample; `K >= 2` cross-fits.
    pub folds: usize,
    pub seed: u64,
    pub level: f64,
    /// True nuisances, required by oracle learners.
    pub truth: Option<Arc<dyn NuisanceTruth>>,
}

/// Out-of-fold predictions `(q_hat(W_i), g_hat(W_i))` for every row.
///
/// Folds are fitted in parallel and collected in fold order, so the result
/// does not depend on scheduling.
pub fn crossfit_predictions(
    data: &Dataset,
    plan: &FitPlan,
) -> Result<(FoldPlan, Vec<f64>, Vec<f64>)> {
    plan.specs.validate()?;
    let folds = FoldPlan::new(data.n(), plan.folds, plan.seed)?;
    let per_fold: Vec<(Vec<usize>, Vec<f64>, Vec<f64>)> = (0..folds.k)
        .into_par_iter()
        .map(|k| {
            let wrap = |e: Error| Error::Fold {
                fold: k,
                source: Box::new(e),
            };
            let train = data
                .subset(&folds.complement(k))
                .ok_or_else(|| wrap(Error::EmptyDataset))?;
            let nuis =
                fit_nuisance(&train, &plan.specs, plan.truth.as_ref(), data.n()).map_err(wrap)?;
            let idx = folds.fold(k);
            let (q, g) = idx
                .iter()
                .map(|&i| {
                    let w = &data.rows()[i].w;
                    (nuis.predict_q(w), nuis.predict_g(w))
                })
                .unzip();
            Ok((idx, q, g))
        })
        .collect::<Result<_>>()?;
    let mut q = vec![0.0; data.n()];
    let mut g = vec![0.0; data.n()];
    for (idx, qk, gk) in per_fold {
        for (j, &i) in idx.iter().enumerate() {
            q[i] = qk[j];
            g[i] = gk[j];
        }
    }
    Ok((folds, q, g))
}

/// Cross-fitted one-step estimate: each row's EIF contribution uses nuisances
/// fitted without its fold, and all `n` contributions are pooled.
pub fn crossfit(data: &Dataset, estimand: Estimand, plan: &FitPlan) -> Result<EstimateReport> {
    let (folds, q, g) = crossfit_predictions(data, plan)?;
    let mut report = onestep_from_predictions(data, estimand, &q, &g, plan.level)?;
    report.fold_plan = Some(folds);
    report.nuisance_specs = Some(plan.specs.clone());
    Ok(report)
}

/// Fits nuisances per `plan` and runs `estimator`. Cross-fitting applies to
/// the one-step estimator only; plug-in and IPW always use full-sample fits.
pub fn estimate(
    data: &Dataset,
    estimand: Estimand,
    estimator: EstimatorKind,
    plan: &FitPlan,
) -> Result<EstimateReport> {
    if plan.folds >= 2 && estimator == EstimatorKind::Onestep {
        return crossfit(data, estimand, plan);
    }
    if plan.folds == 0 {
        return Err(Error::Config("folds must be at least 1".into()));
    }
    let nuis = fit_nuisance(data, &plan.specs, plan.truth.as_ref(), data.n())?;
    estimate_with(data, estimand, estimator, &nuis, plan.level)
}
