//! Nuisance learners for `q(w) = E(Y|W=w,A=0)` and `g(w) = Pr(A=0|W=w)`.
//!
//! Each learner turns a [`Dataset`] into a shareable prediction function.
//! Outcome learners fit on the untreated rows only; propensity learners
//! regress the indicator `I(A=0)` on all rows. The `oracle-rate` kind does
//! not look at data at all: it perturbs the true nuisance by
//! `c * n^(-a) * h(w)` so that its error shrinks at an exactly known rate.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CovKey, Dataset};
use crate::error::{Error, Result};

pub const DEFAULT_TRUNCATION: f64 = 0.01;
pub const RIDGE_JITTER: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 100;
pub const IRLS_TOLERANCE: f64 = 1e-10;
/// Predicted log-likelihood gain below which Newton steps skip the line search.
const NEWTON_REGIME: f64 = 1e-12;

/// A fitted regression function on covariate space.
pub trait Predict: Send + Sync {
    fn predict(&self, w: &[f64]) -> f64;
}

impl<F> Predict for F
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn predict(&self, w: &[f64]) -> f64 {
        self(w)
    }
}

pub type Predictor = Arc<dyn Predict>;

/// The true nuisance functions of a known data-generating law.
pub trait NuisanceTruth: Send + Sync {
    fn q(&self, w: &[f64]) -> f64;
    fn g(&self, w: &[f64]) -> f64;
    /// Median of the first covariate under the true `W` law.
    fn median_w1(&self) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    LinearOls,
    LogisticIrls,
    Knn,
    KernelNw,
    OracleRate,
    MisspecifiedOmit,
    MisspecifiedWronglink,
    /// Stratum means (or frequencies) over exact covariate values.
    Saturated,
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LearnerKind::LinearOls => "linear-ols",
            LearnerKind::LogisticIrls => "logistic-irls",
            LearnerKind::Knn => "knn",
            LearnerKind::KernelNw => "kernel-nw",
            LearnerKind::OracleRate => "oracle-rate",
            LearnerKind::MisspecifiedOmit => "misspecified-omit",
            LearnerKind::MisspecifiedWronglink => "misspecified-wronglink",
            LearnerKind::Saturated => "saturated",
        };
        f.write_str(s)
    }
}

/// Which nuisance function a learner is fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Outcome,
    Propensity,
}

/// Bounded perturbation shapes used by the oracle learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// `sin(pi * w1)`
    Sine,
    /// `+1` if `w1 >= median(w1)`, else `-1`
    Sign,
    /// `1`
    Constant,
}

impl Shape {
    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Shape::Sine),
            1 => Ok(Shape::Sign),
            2 => Ok(Shape::Constant),
            _ => Err(Error::InvalidSpec(format!(
                "unknown perturbation shape {id}"
            ))),
        }
    }

    pub fn eval(self, w: &[f64], median_w1: f64) -> f64 {
        let w1 = w.first().copied().unwrap_or(0.0);
        match self {
            Shape::Sine => (std::f64::consts::PI * w1).sin(),
            Shape::Sign => {
                if w1 >= median_w1 {
                    1.0
                } else {
                    -1.0
                }
            }
            Shape::Constant => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    /// Neighbours for `knn`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Common bandwidth for `kernel-nw` (default: per-covariate `sd * n^(-1/5)`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    /// Rate exponent `a` for `oracle-rate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
    /// Amplitude `c` for `oracle-rate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    /// Perturbation shape id for `oracle-rate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<u8>,
    /// Truncation level for propensity predictions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind) -> Self {
        LearnerSpec {
            kind,
            k: None,
            bandwidth: None,
            exponent: None,
            amplitude: None,
            shape: None,
            truncation: None,
            seed: None,
        }
    }

    pub fn oracle(exponent: f64, amplitude: f64, shape: u8) -> Self {
        LearnerSpec {
            exponent: Some(exponent),
            amplitude: Some(amplitude),
            shape: Some(shape),
            ..LearnerSpec::new(LearnerKind::OracleRate)
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn with_bandwidth(mut self, h: f64) -> Self {
        self.bandwidth = Some(h);
        self
    }

    pub fn with_truncation(mut self, eps: f64) -> Self {
        self.truncation = Some(eps);
        self
    }

    pub fn validate(&self, role: Role) -> Result<()> {
        use LearnerKind::*;
        if matches!(self.kind, LogisticIrls | MisspecifiedWronglink) && role == Role::Outcome {
            return Err(Error::InvalidSpec(format!(
                "{} cannot fit the outcome regression",
                self.kind
            )));
        }
        if let Some(k) = self.k {
            if k == 0 {
                return Err(Error::InvalidSpec("k must be at least 1".into()));
            }
        }
        if let Some(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "bandwidth {h} must be positive"
                )));
            }
        }
        if let Some(eps) = self.truncation {
            if !(eps > 0.0 && eps < 0.5) {
                return Err(Error::InvalidSpec(format!(
                    "truncation {eps} outside (0, 0.5)"
                )));
            }
        }
        if self.kind == OracleRate {
            let a = self
                .exponent
                .ok_or_else(|| Error::InvalidSpec("oracle-rate needs a rate exponent".into()))?;
            if !(a > 0.0 && a <= 0.5) {
                return Err(Error::InvalidSpec(format!("exponent {a} outside (0, 1/2]")));
            }
            let c = self.amplitude.unwrap_or(1.0);
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::InvalidSpec(format!("amplitude {c} must be >= 0")));
            }
            Shape::from_id(self.shape.unwrap_or(0))?;
        }
        Ok(())
    }
}

/// The pair of learners used for one estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceSpecs {
    pub outcome: LearnerSpec,
    pub propensity: LearnerSpec,
}

impl NuisanceSpecs {
    pub fn new(outcome: LearnerSpec, propensity: LearnerSpec) -> Self {
        NuisanceSpecs {
            outcome,
            propensity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.outcome.validate(Role::Outcome)?;
        self.propensity.validate(Role::Propensity)
    }

    pub fn truncation(&self) -> f64 {
        self.propensity.truncation.unwrap_or(DEFAULT_TRUNCATION)
    }

    pub fn uses_oracle(&self) -> bool {
        self.outcome.kind == LearnerKind::OracleRate
            || self.propensity.kind == LearnerKind::OracleRate
    }
}

/// Fitted `(q_hat, g_hat)`. Propensity predictions are clamped to
/// `[eps, 1 - eps]`.
#[derive(Clone)]
pub struct FittedNuisance {
    outcome: Predictor,
    propensity: Predictor,
    truncation: f64,
    pub specs: Option<NuisanceSpecs>,
    pub fold: Option<usize>,
}

impl fmt::Debug for FittedNuisance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FittedNuisance")
            .field("truncation", &self.truncation)
            .field("specs", &self.specs)
            .field("fold", &self.fold)
            .finish_non_exhaustive()
    }
}

impl FittedNuisance {
    pub fn new(outcome: Predictor, propensity: Predictor, truncation: f64) -> Result<Self> {
        if !(truncation > 0.0 && truncation < 0.5) {
            return Err(Error::InvalidSpec(format!(
                "truncation {truncation} outside (0, 0.5)"
            )));
        }
        Ok(FittedNuisance {
            outcome,
            propensity,
            truncation,
            specs: None,
            fold: None,
        })
    }

    /// Wraps two closures; handy for hand-built nuisances.
    pub fn from_fns<Q, G>(q: Q, g: G, truncation: f64) -> Result<Self>
    where
        Q: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self::new(Arc::new(q), Arc::new(g), truncation)
    }

    pub fn predict_q(&self, w: &[f64]) -> f64 {
        self.outcome.predict(w)
    }

    pub fn predict_g(&self, w: &[f64]) -> f64 {
        truncate(self.propensity.predict(w), self.truncation)
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn outcome(&self) -> &Predictor {
        &self.outcome
    }

    pub fn propensity(&self) -> &Predictor {
        &self.propensity
    }
}

/// Clamps to `[eps, 1 - eps]`; NaN maps to `eps`.
pub fn truncate(g: f64, eps: f64) -> f64 {
    if g.is_nan() {
        eps
    } else {
        g.clamp(eps, 1.0 - eps)
    }
}

/// Fits `q_hat` on the untreated rows of `data`.
pub fn fit_outcome(data: &Dataset, spec: &LearnerSpec) -> Result<Predictor> {
    spec.validate(Role::Outcome)?;
    let (x, y): (Vec<&[f64]>, Vec<f64>) = data
        .iter()
        .filter(|r| r.untreated())
        .map(|r| (r.w.as_slice(), r.y))
        .unzip();
    if x.is_empty() {
        return Err(Error::NoUntreatedRows);
    }
    fit_regression(spec, &x, &y, Role::Outcome)
}

/// Fits the raw (untruncated) `g_hat` by regressing `I(A=0)` on all rows.
pub fn fit_propensity(data: &Dataset, spec: &LearnerSpec) -> Result<Predictor> {
    spec.validate(Role::Propensity)?;
    if spec.kind == LearnerKind::OracleRate {
        return Err(Error::OracleUnavailable);
    }
    let untreated = data.iter().filter(|r| r.untreated()).count();
    if untreated == 0 {
        return Err(Error::DegenerateTreatment(1));
    }
    if untreated == data.n() {
        return Err(Error::DegenerateTreatment(0));
    }
    let (x, z): (Vec<&[f64]>, Vec<f64>) = data
        .iter()
        .map(|r| (r.w.as_slice(), if r.untreated() { 1.0 } else { 0.0 }))
        .unzip();
    fit_regression(spec, &x, &z, Role::Propensity)
}

fn fit_regression(spec: &LearnerSpec, x: &[&[f64]], y: &[f64], role: Role) -> Result<Predictor> {
    let all: Vec<usize> = (0..x.first().map_or(0, |r| r.len())).collect();
    match spec.kind {
        LearnerKind::LinearOls | LearnerKind::MisspecifiedWronglink => {
            Ok(Arc::new(LinearModel::fit(x, y, all)?))
        }
        LearnerKind::LogisticIrls => Ok(Arc::new(LogisticModel::fit(x, y, all)?)),
        LearnerKind::MisspecifiedOmit => {
            let kept: Vec<usize> = all.into_iter().skip(1).collect();
            match role {
                Role::Outcome => Ok(Arc::new(LinearModel::fit(x, y, kept)?)),
                Role::Propensity => Ok(Arc::new(LogisticModel::fit(x, y, kept)?)),
            }
        }
        LearnerKind::Knn => {
            let k = spec
                .k
                .unwrap_or_else(|| (x.len() as f64).sqrt().ceil() as usize);
            Ok(Arc::new(Knn::new(x, y, k)))
        }
        LearnerKind::KernelNw => Ok(Arc::new(KernelNw::new(x, y, spec.bandwidth))),
        LearnerKind::Saturated => Ok(Arc::new(Saturated::new(x, y))),
        LearnerKind::OracleRate => Err(Error::OracleUnavailable),
    }
}

/// Builds the oracle predictor `truth + c * n^(-a) * h(w)` for one role.
pub fn oracle_predictor(
    truth: Arc<dyn NuisanceTruth>,
    role: Role,
    n: usize,
    spec: &LearnerSpec,
) -> Result<Predictor> {
    spec.validate(role)?;
    if spec.kind != LearnerKind::OracleRate {
        return Err(Error::InvalidSpec(format!(
            "{} is not an oracle learner",
            spec.kind
        )));
    }
    let a = spec.exponent.expect("validated");
    let c = spec.amplitude.unwrap_or(1.0);
    let shape = Shape::from_id(spec.shape.unwrap_or(0))?;
    let scale = c * (n.max(1) as f64).powf(-a);
    let median = truth.median_w1();
    Ok(match role {
        Role::Outcome => Arc::new(move |w: &[f64]| truth.q(w) + scale * shape.eval(w, median)),
        Role::Propensity => Arc::new(move |w: &[f64]| truth.g(w) + scale * shape.eval(w, median)),
    })
}

/// Both nuisances from the oracle construction, at nominal sample size `n`.
pub fn oracle_rate_nuisance(
    truth: Arc<dyn NuisanceTruth>,
    n: usize,
    specs: &NuisanceSpecs,
) -> Result<FittedNuisance> {
    specs.validate()?;
    let q = oracle_predictor(truth.clone(), Role::Outcome, n, &specs.outcome)?;
    let g = oracle_predictor(truth, Role::Propensity, n, &specs.propensity)?;
    let mut fitted = FittedNuisance::new(q, g, specs.truncation())?;
    fitted.specs = Some(specs.clone());
    Ok(fitted)
}

/// Fits both nuisances on `data`. Oracle learners use `truth` and the
/// nominal sample size `nominal_n` (the full-sample size under cross-fitting).
pub fn fit_nuisance(
    data: &Dataset,
    specs: &NuisanceSpecs,
    truth: Option<&Arc<dyn NuisanceTruth>>,
    nominal_n: usize,
) -> Result<FittedNuisance> {
    specs.validate()?;
    let q = if specs.outcome.kind == LearnerKind::OracleRate {
        let t = truth.ok_or(Error::OracleUnavailable)?.clone();
        oracle_predictor(t, Role::Outcome, nominal_n, &specs.outcome)?
    } else {
        fit_outcome(data, &specs.outcome)?
    };
    let g = if specs.propensity.kind == LearnerKind::OracleRate {
        let t = truth.ok_or(Error::OracleUnavailable)?.clone();
        oracle_predictor(t, Role::Propensity, nominal_n, &specs.propensity)?
    } else {
        fit_propensity(data, &specs.propensity)?
    };
    let mut fitted = FittedNuisance::new(q, g, specs.truncation())?;
    fitted.specs = Some(specs.clone());
    Ok(fitted)
}

fn design_row(w: &[f64], cols: &[usize], out: &mut [f64]) {
    out[0] = 1.0;
    for (j, &c) in cols.iter().enumerate() {
        out[j + 1] = w[c];
    }
}

/// Least squares with intercept on selected covariates.
#[derive(Debug, Clone)]
struct LinearModel {
    cols: Vec<usize>,
    beta: Vec<f64>,
}

impl LinearModel {
    fn fit(x: &[&[f64]], y: &[f64], cols: Vec<usize>) -> Result<Self> {
        let p = cols.len() + 1;
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        let mut xty = DVector::<f64>::zeros(p);
        let mut row = vec![0.0; p];
        for (w, &yi) in x.iter().zip(y) {
            design_row(w, &cols, &mut row);
            for i in 0..p {
                xty[i] += row[i] * yi;
                for j in 0..=i {
                    xtx[(i, j)] += row[i] * row[j];
                }
            }
        }
        symmetrize(&mut xtx);
        for i in 0..p {
            xtx[(i, i)] += RIDGE_JITTER;
        }
        let beta = xtx.cholesky().ok_or(Error::SingularDesign)?.solve(&xty);
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::SingularDesign);
        }
        Ok(LinearModel {
            cols,
            beta: beta.iter().copied().collect(),
        })
    }

    fn linear(&self, w: &[f64]) -> f64 {
        self.beta[0]
            + self
                .cols
                .iter()
                .zip(&self.beta[1..])
                .map(|(&c, b)| b * w[c])
                .sum::<f64>()
    }
}

impl Predict for LinearModel {
    fn predict(&self, w: &[f64]) -> f64 {
        self.linear(w)
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for i in 0..p {
        for j in 0..i {
            m[(j, i)] = m[(i, j)];
        }
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Logistic regression of a 0/1 response, fit by Newton-Raphson (IRLS) with
/// step halving on the log-likelihood.
#[derive(Debug, Clone)]
struct LogisticModel(LinearModel);

impl LogisticModel {
    fn fit(x: &[&[f64]], z: &[f64], cols: Vec<usize>) -> Result<Self> {
        let p = cols.len() + 1;
        let n = x.len() as f64;
        let rows: Vec<Vec<f64>> = x
            .iter()
            .map(|w| {
                let mut r = vec![0.0; p];
                design_row(w, &cols, &mut r);
                r
            })
            .collect();
        let eta_of = |beta: &DVector<f64>| -> Vec<f64> {
            rows.iter()
                .map(|r| r.iter().zip(beta.iter()).map(|(a, b)| a * b).sum())
                .collect()
        };
        let loglik = |eta: &[f64]| -> f64 {
            eta.iter()
                .zip(z)
                .map(|(&e, &zi)| {
                    if zi > 0.5 {
                        -softplus(-e)
                    } else {
                        -softplus(e)
                    }
                })
                .sum::<f64>()
                / n
        };

        let mut beta = DVector::<f64>::zeros(p);
        let mut eta = eta_of(&beta);
        let mut ll = loglik(&eta);
        let mut grad_norm = f64::INFINITY;
        for _ in 0..IRLS_MAX_ITER {
            let mut grad = DVector::<f64>::zeros(p);
            let mut hess = DMatrix::<f64>::zeros(p, p);
            for ((r, &e), &zi) in rows.iter().zip(&eta).zip(z) {
                let mu = sigmoid(e);
                let wt = mu * (1.0 - mu);
                for i in 0..p {
                    grad[i] += r[i] * (zi - mu);
                    for j in 0..=i {
                        hess[(i, j)] += wt * r[i] * r[j];
                    }
                }
            }
            grad /= n;
            hess /= n;
            symmetrize(&mut hess);
            grad_norm = grad.norm();
            if grad_norm < IRLS_TOLERANCE {
                return Ok(LogisticModel(LinearModel {
                    cols,
                    beta: beta.iter().copied().collect(),
                }));
            }
            let chol = match hess.clone().cholesky() {
                Some(c) => c,
                None => {
                    for i in 0..p {
                        hess[(i, i)] += RIDGE_JITTER;
                    }
                    hess.cholesky().ok_or(Error::SingularDesign)?
                }
            };
            let step = chol.solve(&grad);
            if grad.dot(&step) < NEWTON_REGIME {
                // likelihood gains are below f64 resolution; plain Newton
                beta += &step;
                eta = eta_of(&beta);
                ll = loglik(&eta);
                continue;
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let cand = &beta + &step * t;
                let cand_eta = eta_of(&cand);
                let cand_ll = loglik(&cand_eta);
                if cand_ll.is_finite() && cand_ll >= ll {
                    beta = cand;
                    eta = cand_eta;
                    ll = cand_ll;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                // no ascent direction left at working precision
                break;
            }
        }
        Err(Error::IrlsDivergence {
            iterations: IRLS_MAX_ITER,
            grad_norm,
        })
    }
}

impl Predict for LogisticModel {
    fn predict(&self, w: &[f64]) -> f64 {
        sigmoid(self.0.linear(w))
    }
}

/// Mean response of the `k` nearest training points (Euclidean distance,
/// ties broken by training index).
#[derive(Debug, Clone)]
struct Knn {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    k: usize,
}

impl Knn {
    fn new(x: &[&[f64]], y: &[f64], k: usize) -> Self {
        Knn {
            x: x.iter().map(|r| r.to_vec()).collect(),
            y: y.to_vec(),
            k: k.clamp(1, x.len()),
        }
    }
}

impl Predict for Knn {
    fn predict(&self, w: &[f64]) -> f64 {
        let mut d: Vec<(f64, usize)> = self
            .x
            .iter()
            .enumerate()
            .map(|(i, r)| (sq_dist(r, w), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < d.len() {
            d.select_nth_unstable_by(self.k - 1, cmp);
        }
        let mut nearest: Vec<usize> = d[..self.k].iter().map(|p| p.1).collect();
        nearest.sort_unstable();
        nearest.iter().map(|&i| self.y[i]).sum::<f64>() / self.k as f64
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nadaraya-Watson smoother with a Gaussian product kernel.
#[derive(Debug, Clone)]
struct KernelNw {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    inv_h: Vec<f64>,
}

impl KernelNw {
    fn new(x: &[&[f64]], y: &[f64], bandwidth: Option<f64>) -> Self {
        let n = x.len();
        let d = x[0].len();
        let inv_h = (0..d)
            .map(|j| {
                let h = bandwidth.unwrap_or_else(|| {
                    let mean = x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
                    let var = if n > 1 {
                        x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64
                    } else {
                        0.0
                    };
                    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
                    sd * (n as f64).powf(-0.2)
                });
                1.0 / h
            })
            .collect();
        KernelNw {
            x: x.iter().map(|r| r.to_vec()).collect(),
            y: y.to_vec(),
            inv_h,
        }
    }
}

impl Predict for KernelNw {
    fn predict(&self, w: &[f64]) -> f64 {
        // streaming log-sum-exp: weights are exp(-(u - u_min)/2)
        let mut u_min = f64::INFINITY;
        let (mut sw, mut swy) = (0.0, 0.0);
        for (r, &yi) in self.x.iter().zip(&self.y) {
            let u: f64 = r
                .iter()
                .zip(w)
                .zip(&self.inv_h)
                .map(|((a, b), ih)| {
                    let t = (a - b) * ih;
                    t * t
                })
                .sum();
            if u < u_min {
                let rescale = (-0.5 * (u_min - u)).exp();
                sw *= rescale;
                swy *= rescale;
                u_min = u;
            }
            let k = (-0.5 * (u - u_min)).exp();
            sw += k;
            swy += k * yi;
        }
        swy / sw
    }
}

/// Stratum means over exact covariate values; unseen strata get the overall
/// mean.
#[derive(Debug, Clone)]
struct Saturated {
    means: HashMap<CovKey, f64>,
    overall: f64,
}

impl Saturated {
    fn new(x: &[&[f64]], y: &[f64]) -> Self {
        let mut sums: HashMap<CovKey, (f64, usize)> = HashMap::new();
        for (w, &yi) in x.iter().zip(y) {
            let e = sums.entry(CovKey::new(w)).or_insert((0.0, 0));
            e.0 += yi;
            e.1 += 1;
        }
        let overall = y.iter().sum::<f64>() / y.len() as f64;
        Saturated {
            means: sums
                .into_iter()
                .map(|(k, (s, c))| (k, s / c as f64))
                .collect(),
            overall,
        }
    }
}

impl Predict for Saturated {
    fn predict(&self, w: &[f64]) -> f64 {
        self.means
            .get(&CovKey::new(w))
            .copied()
            .unwrap_or(self.overall)
    }
}
