//! Exact error analysis of the one-step estimators on finite-support truths.
//!
//! Writing `psi_hat` for the plug-in value and `phi_hat` for the estimated
//! EIF centred at it, the plug-in error splits as
//!
//! ```text
//! sqrt(n) (psi_hat - psi) = sqrt(n) P_n phi                 (CLT)
//!                         - sqrt(n) P_n phi_hat             (drift)
//!                         + sqrt(n) (P_n - P)(phi_hat - phi) (empirical process)
//!                         - sqrt(n) R
//! ```
//!
//! with `R = psi(P) - psi(P_hat) - E_P[phi_hat]`. Every `E_P` is a finite sum,
//! so the identities here hold to rounding error.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distribution::{Estimand, FiniteDistribution};
use crate::error::{Error, Result};
use crate::learners::{oracle_rate_nuisance, FittedNuisance, NuisanceSpecs, NuisanceTruth};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaTerms {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderReport {
    pub estimand: Estimand,
    pub remainder_direct: f64,
    pub remainder_closed_form: f64,
    pub cs_bound: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<ThetaTerms>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub estimand: Estimand,
    pub n: usize,
    pub truth: f64,
    pub plug_in: f64,
    pub clt_term: f64,
    pub drift_term: f64,
    pub empirical_process_term: f64,
    /// `sqrt(n) R`.
    pub remainder: f64,
    pub total_error: f64,
}

impl DecompositionReport {
    /// `clt - drift + ep - remainder - total`; zero up to rounding.
    pub fn closure_error(&self) -> f64 {
        self.clt_term - self.drift_term + self.empirical_process_term
            - self.remainder
            - self.total_error
    }
}

/// Per-stratum quantities shared by the remainder formulas.
struct StratumView {
    p: f64,
    p_treated: f64,
    g: f64,
    q: f64,
    g_hat: f64,
    q_hat: f64,
}

fn strata(p: &FiniteDistribution, nuis: &FittedNuisance) -> Result<Vec<StratumView>> {
    p.covariate_support()
        .map(|(w, mass)| {
            let q = p
                .q_of(w)
                .map_err(|_| Error::PositivityViolation { w: w.to_vec() })?;
            let g = p.g_of(w)?;
            Ok(StratumView {
                p: mass,
                p_treated: mass - p.joint_untreated(w),
                g,
                q,
                g_hat: nuis.predict_g(w),
                q_hat: nuis.predict_q(w),
            })
        })
        .collect()
}

fn l2_and_sup(view: &[StratumView]) -> (f64, f64, f64) {
    let mut eg = 0.0;
    let mut eq = 0.0;
    let mut sup_inv = 0.0f64;
    for s in view {
        eg += s.p * (s.g - s.g_hat).powi(2);
        eq += s.p * (s.q - s.q_hat).powi(2);
        sup_inv = sup_inv.max(1.0 / s.g_hat);
    }
    (eg.sqrt(), eq.sqrt(), sup_inv)
}

/// `R = psi(P) - psi(P_hat) - E_P[phi(O, P_hat)]` by summation over atoms,
/// against `-E[(g - g_hat)/g_hat (q - q_hat)]` by summation over strata.
/// `psi(P_hat)` is `E_P[q_hat(W)]`.
pub fn remainder_exact_psi(
    p: &FiniteDistribution,
    nuis: &FittedNuisance,
) -> Result<RemainderReport> {
    let psi = p.psi()?;
    let view = strata(p, nuis)?;
    let psi_hat: f64 = view.iter().map(|s| s.p * s.q_hat).sum();
    let eif_mean = p.expectation(|o| {
        let (q_hat, g_hat) = (nuis.predict_q(&o.w), nuis.predict_g(&o.w));
        let residual = if o.untreated() {
            (o.y - q_hat) / g_hat
        } else {
            0.0
        };
        residual + q_hat - psi_hat
    });
    let direct = psi - psi_hat - eif_mean;
    let closed: f64 = -view
        .iter()
        .map(|s| s.p * (s.g - s.g_hat) / s.g_hat * (s.q - s.q_hat))
        .sum::<f64>();
    let (lg, lq, sup_inv) = l2_and_sup(&view);
    Ok(RemainderReport {
        estimand: Estimand::Psi,
        remainder_direct: direct,
        remainder_closed_form: closed,
        cs_bound: sup_inv * lg * lq,
        terms: None,
    })
}

/// The `theta` remainder with the EIF's `Pr(A=1)` replaced by `pn_a` and
/// `theta(P_hat)` taken as `E_P[q_hat(W) | A=1]`.
///
/// `R = theta(P) - theta(P_hat) - E_P[phi'(O, P_hat)]` equals `s1 + s2 + s3`
/// with
///
/// ```text
/// s1 = -E[(g - g_hat)/g_hat (1 - g_hat)/pn_a (q - q_hat)]
/// s2 = -E[(g_hat - g)/pn_a (q_hat - q)]
/// s3 = -(Pr(A=1) - pn_a)/pn_a (theta(P) - theta(P_hat))
/// ```
pub fn remainder_exact_theta(
    p: &FiniteDistribution,
    nuis: &FittedNuisance,
    pn_a: f64,
) -> Result<RemainderReport> {
    theta_remainder_at(p, nuis, pn_a, None)
}

/// As [`remainder_exact_theta`], optionally centring `phi'` and `s3` at a
/// given `theta(P_hat)` value. The identity holds for any centring.
fn theta_remainder_at(
    p: &FiniteDistribution,
    nuis: &FittedNuisance,
    pn_a: f64,
    centre: Option<f64>,
) -> Result<RemainderReport> {
    if !(pn_a > 0.0 && pn_a <= 1.0) {
        return Err(Error::Config(format!("P_n(A) = {pn_a} outside (0, 1]")));
    }
    let theta = p.theta()?;
    let pr1 = p.pr_treated();
    let view = strata(p, nuis)?;
    let theta_hat =
        centre.unwrap_or_else(|| view.iter().map(|s| s.p_treated * s.q_hat).sum::<f64>() / pr1);
    let eif_mean = p.expectation(|o| {
        let (q_hat, g_hat) = (nuis.predict_q(&o.w), nuis.predict_g(&o.w));
        if o.untreated() {
            (1.0 - g_hat) / g_hat * (o.y - q_hat) / pn_a
        } else {
            (q_hat - theta_hat) / pn_a
        }
    });
    let direct = theta - theta_hat - eif_mean;

    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for s in &view {
        s1 -= s.p * (s.g - s.g_hat) / s.g_hat * (1.0 - s.g_hat) / pn_a * (s.q - s.q_hat);
        s2 -= s.p * (s.g_hat - s.g) / pn_a * (s.q_hat - s.q);
    }
    let s3 = -(pr1 - pn_a) / pn_a * (theta - theta_hat);
    let (lg, lq, sup_inv) = l2_and_sup(&view);
    Ok(RemainderReport {
        estimand: Estimand::Theta,
        remainder_direct: direct,
        remainder_closed_form: s1 + s2 + s3,
        // s1 + s2 = -E[(g - g_hat)(q - q_hat) / g_hat] / pn_a
        cs_bound: sup_inv / pn_a * lg * lq + s3.abs(),
        terms: Some(ThetaTerms { s1, s2, s3 }),
    })
}

pub fn remainder_exact(
    p: &FiniteDistribution,
    nuis: &FittedNuisance,
    estimand: Estimand,
) -> Result<RemainderReport> {
    match estimand {
        Estimand::Psi => remainder_exact_psi(p, nuis),
        Estimand::Theta => remainder_exact_theta(p, nuis, p.pr_treated()),
    }
}

/// The four-term expansion of `sqrt(n) (plug-in - truth)` for one sample.
///
/// The estimated EIF is centred at the sample plug-in (`P_n q_hat` for psi,
/// the treated-row mean of `q_hat` for theta), and `theta` uses `P_n(A)` of
/// the sample.
pub fn decompose_error(
    p: &FiniteDistribution,
    nuis: &FittedNuisance,
    sample: &Dataset,
    estimand: Estimand,
) -> Result<DecompositionReport> {
    let n = sample.n();
    let root_n = (n as f64).sqrt();
    let true_eif = p.eif(estimand)?;
    let truth = true_eif.estimand_value();

    let (plug_in, pn_a) = match estimand {
        Estimand::Psi => (
            sample.iter().map(|o| nuis.predict_q(&o.w)).sum::<f64>() / n as f64,
            None,
        ),
        Estimand::Theta => {
            let pn = sample.treated_fraction();
            if pn <= 0.0 {
                return Err(Error::NoTreatedRows);
            }
            let treated: Vec<f64> = sample
                .iter()
                .filter(|o| o.treated())
                .map(|o| nuis.predict_q(&o.w))
                .collect();
            (treated.iter().sum::<f64>() / treated.len() as f64, Some(pn))
        }
    };

    let phi_hat = |o: &crate::data::Observation| -> f64 {
        let (q_hat, g_hat) = (nuis.predict_q(&o.w), nuis.predict_g(&o.w));
        match pn_a {
            None => {
                let residual = if o.untreated() {
                    (o.y - q_hat) / g_hat
                } else {
                    0.0
                };
                residual + q_hat - plug_in
            }
            Some(pn) => {
                if o.untreated() {
                    (1.0 - g_hat) / g_hat * (o.y - q_hat) / pn
                } else {
                    (q_hat - plug_in) / pn
                }
            }
        }
    };

    let mut pn_phi = 0.0;
    let mut pn_phi_hat = 0.0;
    for o in sample {
        pn_phi += true_eif.eval(o)?;
        pn_phi_hat += phi_hat(o);
    }
    pn_phi /= n as f64;
    pn_phi_hat /= n as f64;

    let mut p_diff = 0.0;
    for atom in p.atoms() {
        p_diff += atom.mass * (phi_hat(&atom.obs) - true_eif.eval(&atom.obs)?);
    }
    let pn_diff = pn_phi_hat - pn_phi;

    let r = match pn_a {
        None => remainder_exact_psi(p, nuis)?.remainder_direct,
        Some(pn) => theta_remainder_at(p, nuis, pn, Some(plug_in))?.remainder_direct,
    };

    Ok(DecompositionReport {
        estimand,
        n,
        truth,
        plug_in,
        clt_term: root_n * pn_phi,
        drift_term: root_n * pn_phi_hat,
        empirical_process_term: root_n * (pn_diff - p_diff),
        remainder: root_n * r,
        total_error: root_n * (plug_in - truth),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub remainder: f64,
    pub cs_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub estimand: Estimand,
    pub specs: NuisanceSpecs,
    pub points: Vec<SweepPoint>,
    /// Least-squares slope of `log |R|` on `log n`; `None` if some `R` is zero.
    pub slope: Option<f64>,
}

/// Exact remainder of oracle nuisances at each `n` in `n_grid`.
///
/// `truth` supplies the true `q` and `g` (a finite law or a quadrature grid
/// of a continuous one); the oracle errors are `c n^(-a)` for `g` and
/// `c n^(-b)` for `q`, with exponents taken from `specs`.
pub fn remainder_rate_sweep(
    truth: &FiniteDistribution,
    specs: &NuisanceSpecs,
    n_grid: &[usize],
    estimand: Estimand,
) -> Result<SweepReport> {
    if n_grid.is_empty() {
        return Err(Error::Config("n_grid is empty".into()));
    }
    let shared: Arc<dyn NuisanceTruth> = Arc::new(truth.clone());
    let points: Vec<SweepPoint> = n_grid
        .par_iter()
        .map(|&n| {
            let nuis = oracle_rate_nuisance(shared.clone(), n, specs)?;
            let r = remainder_exact(truth, &nuis, estimand)?;
            Ok(SweepPoint {
                n,
                remainder: r.remainder_direct,
                cs_bound: r.cs_bound,
            })
        })
        .collect::<Result<_>>()?;
    let slope = if points.iter().all(|pt| pt.remainder != 0.0) {
        let xs: Vec<f64> = points.iter().map(|pt| pt.n as f64).collect();
        let ys: Vec<f64> = points.iter().map(|pt| pt.remainder.abs()).collect();
        log_log_slope(&xs, &ys)
    } else {
        None
    };
    Ok(SweepReport {
        estimand,
        specs: specs.clone(),
        points,
        slope,
    })
}

/// Least-squares slope of `ln y` on `ln x`. Needs two distinct positive `x`
/// and positive `y`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0 && v.is_finite())) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::Atom;
    use crate::learners::LearnerSpec;

    fn four_atom() -> FiniteDistribution {
        FiniteDistribution::new(vec![
            Atom::new(vec![0.0], 0, 0.0, 0.2),
            Atom::new(vec![0.0], 1, 3.0, 0.3),
            Atom::new(vec![1.0], 0, 2.0, 0.35),
            Atom::new(vec![1.0], 1, -1.0, 0.15),
        ])
        .unwrap()
    }

    fn exact(p: &FiniteDistribution) -> FittedNuisance {
        let (pq, pg) = (p.clone(), p.clone());
        FittedNuisance::from_fns(
            move |w| pq.q_of(w).unwrap(),
            move |w| pg.g_of(w).unwrap(),
            0.01,
        )
        .unwrap()
    }

    fn perturbed(p: &FiniteDistribution, dq: f64, dg: f64) -> FittedNuisance {
        let (pq, pg) = (p.clone(), p.clone());
        FittedNuisance::from_fns(
            move |w| pq.q_of(w).unwrap() + dq * (1.0 + w[0]),
            move |w| pg.g_of(w).unwrap() - dg * (1.0 - 2.0 * w[0]),
            0.01,
        )
        .unwrap()
    }

    #[test]
    fn exact_nuisances_give_zero_remainder() {
        let p = four_atom();
        let r = remainder_exact_psi(&p, &exact(&p)).unwrap();
        assert!(r.remainder_direct.abs() < 1e-12 && r.remainder_closed_form == 0.0);
        let r = remainder_exact_theta(&p, &exact(&p), p.pr_treated()).unwrap();
        assert!(r.remainder_direct.abs() < 1e-12);
        let t = r.terms.unwrap();
        assert_eq!((t.s1, t.s2), (0.0, 0.0));
        assert!(t.s3.abs() < 1e-15);
    }

    #[test]
    fn one_exact_nuisance_kills_psi_remainder() {
        let p = four_atom();
        for nuis in [perturbed(&p, 0.0, 0.1), perturbed(&p, 0.4, 0.0)] {
            let r = remainder_exact_psi(&p, &nuis).unwrap();
            assert!(r.remainder_direct.abs() < 1e-12);
            assert!(r.remainder_closed_form.abs() < 1e-12);
        }
    }

    #[test]
    fn exact_nuisances_other_pn_gives_zero_s3() {
        let p = four_atom();
        let r = remainder_exact_theta(&p, &exact(&p), 0.3).unwrap();
        let t = r.terms.unwrap();
        assert_eq!((t.s1, t.s2), (0.0, 0.0));
        assert!(t.s3.abs() < 1e-15 && r.remainder_direct.abs() < 1e-12);
    }

    #[test]
    fn perturbed_identities() {
        let p = four_atom();
        let nuis = perturbed(&p, 0.3, 0.08);
        let r = remainder_exact_psi(&p, &nuis).unwrap();
        assert!((r.remainder_direct - r.remainder_closed_form).abs() < 1e-12);
        assert!(r.remainder_direct.abs() > 1e-3);
        assert!(r.remainder_direct.abs() <= r.cs_bound);

        // independent oracle: -sum_w p(w) (g - g_hat)/g_hat (q - q_hat)
        let mut want = 0.0;
        for (w, pw) in p.covariate_support() {
            let (g, q) = (p.g_of(w).unwrap(), p.q_of(w).unwrap());
            let (gh, qh) = (nuis.predict_g(w), nuis.predict_q(w));
            want -= pw * (g - gh) / gh * (q - qh);
        }
        assert!((r.remainder_closed_form - want).abs() < 1e-15);

        for pn in [p.pr_treated(), 0.3, 0.61] {
            let r = remainder_exact_theta(&p, &nuis, pn).unwrap();
            assert!(
                (r.remainder_direct - r.remainder_closed_form).abs() < 1e-12,
                "pn={pn}"
            );
            assert!(r.remainder_direct.abs() <= r.cs_bound);
        }
    }

    #[test]
    fn decomposition_closes() {
        let p = four_atom();
        let sample = Dataset::new(
            p.atoms()
                .iter()
                .cycle()
                .take(11)
                .map(|a| a.obs.clone())
                .collect(),
        )
        .unwrap();
        for est in [Estimand::Psi, Estimand::Theta] {
            for nuis in [exact(&p), perturbed(&p, 0.3, 0.08)] {
                let d = decompose_error(&p, &nuis, &sample, est).unwrap();
                assert!(d.closure_error().abs() < 1e-10, "{d:?}");
            }
        }
        // for theta the sample share of treated rows still enters phi_hat
        let d = decompose_error(&p, &exact(&p), &sample, Estimand::Psi).unwrap();
        assert!(d.empirical_process_term.abs() < 1e-12);
        assert!(d.remainder.abs() < 1e-12);
    }

    #[test]
    fn proportional_sample_has_zero_clt() {
        let p = FiniteDistribution::new(vec![
            Atom::new(vec![0.0], 0, 0.0, 0.25),
            Atom::new(vec![0.0], 1, 1.0, 0.25),
            Atom::new(vec![1.0], 0, 2.0, 0.25),
            Atom::new(vec![1.0], 1, 5.0, 0.25),
        ])
        .unwrap();
        let sample = Dataset::new(p.atoms().iter().map(|a| a.obs.clone()).collect()).unwrap();
        for est in [Estimand::Psi, Estimand::Theta] {
            let d = decompose_error(&p, &perturbed(&p, 0.2, 0.1), &sample, est).unwrap();
            assert!(d.clt_term.abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_with_zero_amplitude() {
        let p = four_atom();
        let specs = NuisanceSpecs::new(
            LearnerSpec::oracle(0.25, 0.0, 0),
            LearnerSpec::oracle(0.25, 0.0, 0),
        );
        let s = remainder_rate_sweep(&p, &specs, &[16, 256], Estimand::Psi).unwrap();
        assert!(s.points.iter().all(|pt| pt.remainder.abs() < 1e-12));
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [10.0, 100.0, 1000.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((log_log_slope(&xs, &ys).unwrap() + 0.5).abs() < 1e-12);
        assert!(log_log_slope(&[1.0], &[1.0]).is_none());
    }
}
