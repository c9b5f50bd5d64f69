//! Mixture submodels `P_e = e * P_hat + (1 - e) * P` and the numerical check
//! that `d/de functional(P_e)` at `e = 0` equals `E_{P_hat}[phi(O, P)]`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{atom_key, Atom, Estimand, FiniteDistribution};
use crate::data::CovKey;
use crate::error::{Error, Result};

/// Default step sizes for the Richardson-extrapolated difference quotient.
pub const DEFAULT_STEP_GRID: [f64; 2] = [1e-3, 5e-4];

#[derive(Debug, Clone, Copy)]
pub struct SubmodelMix<'a> {
    pub base: &'a FiniteDistribution,
    pub direction: &'a FiniteDistribution,
    pub e: f64,
}

/// How the derivative at `e = 0` was approximated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifferenceScheme {
    /// Symmetric quotients over `[-h, h]`, extrapolated in `h^2`.
    Central,
    /// One-sided quotients over `[0, h]`, extrapolated in `h`.
    Forward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub estimand: Estimand,
    pub finite_difference: f64,
    pub eif_integral: f64,
    pub discrepancy: f64,
    pub scheme: DifferenceScheme,
    /// Requested steps, in units of `step_scale`.
    pub step_grid: Vec<f64>,
    /// Distance from `e = 0` to the nearest `e < 0` at which an atom of `P_e`
    /// loses its mass, capped at 1. The functional is rational in `e` with
    /// poles no closer than this, so steps are measured against it.
    pub step_scale: f64,
}

type AtomKey = (CovKey, u8, u64);

/// Direction masses keyed by atom, after checking the direction lives on the
/// base's support.
fn aligned_direction(
    base: &FiniteDistribution,
    direction: &FiniteDistribution,
) -> Result<HashMap<AtomKey, f64>> {
    if base.dim() != direction.dim() {
        return Err(Error::SupportViolation(format!(
            "direction has covariate dimension {}, base has {}",
            direction.dim(),
            base.dim()
        )));
    }
    let mut out = HashMap::with_capacity(direction.atoms().len());
    for atom in direction.atoms() {
        if !base.contains_atom(&atom.obs) {
            return Err(Error::SupportViolation(format!(
                "direction atom {:?} is outside the base support",
                atom.obs
            )));
        }
        out.insert(atom_key(&atom.obs), atom.mass);
    }
    Ok(out)
}

/// Atomwise `(1 - e) p + e p_hat`; `e` may be slightly negative as long as
/// every mass stays positive. Returns `None` when some mass is not positive
/// and `e < 0`.
fn perturbed(
    base: &FiniteDistribution,
    direction: &HashMap<AtomKey, f64>,
    e: f64,
) -> Result<Option<FiniteDistribution>> {
    let mut atoms = Vec::with_capacity(base.atoms().len());
    for atom in base.atoms() {
        let target = direction.get(&atom_key(&atom.obs)).copied().unwrap_or(0.0);
        let mass = (1.0 - e) * atom.mass + e * target;
        if mass > 0.0 {
            atoms.push(Atom {
                obs: atom.obs.clone(),
                mass,
            });
        } else if e < 0.0 {
            return Ok(None);
        }
    }
    FiniteDistribution::new(atoms).map(Some)
}

fn step_scale(base: &FiniteDistribution, direction: &HashMap<AtomKey, f64>) -> f64 {
    base.atoms()
        .iter()
        .filter_map(|atom| {
            let target = direction.get(&atom_key(&atom.obs)).copied().unwrap_or(0.0);
            (target > atom.mass).then(|| atom.mass / (target - atom.mass))
        })
        .fold(1.0, f64::min)
}

/// The mixture `P_e` over the union of supports.
pub fn mix(sub: &SubmodelMix<'_>) -> Result<FiniteDistribution> {
    if !(0.0..=1.0).contains(&sub.e) {
        return Err(Error::SupportViolation(format!(
            "mixing weight {} outside [0, 1]",
            sub.e
        )));
    }
    let direction = aligned_direction(sub.base, sub.direction)?;
    if sub.e == 1.0 {
        return Ok(sub.direction.clone());
    }
    perturbed(sub.base, &direction, sub.e)
        .map(|d| d.expect("non-negative mixing weight never yields None"))
}

/// Polynomial extrapolation to `x = 0` through `(xs[i], ys[i])` (Neville).
fn extrapolate_to_zero(xs: &[f64], ys: &[f64]) -> f64 {
    let mut p = ys.to_vec();
    let m = xs.len();
    for j in 1..m {
        for i in 0..m - j {
            p[i] = (xs[i] * p[i + 1] - xs[i + j] * p[i]) / (xs[i] - xs[i + j]);
        }
    }
    p[0]
}

fn validate_steps(step_grid: &[f64]) -> Result<()> {
    if step_grid.is_empty() {
        return Err(Error::Config("step grid is empty".into()));
    }
    if step_grid.iter().any(|&h| !(h > 0.0 && h < 1.0)) {
        return Err(Error::Config("step sizes must lie in (0, 1)".into()));
    }
    if step_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(
            "step grid must be strictly decreasing".into(),
        ));
    }
    Ok(())
}

/// Compares a Richardson-extrapolated difference quotient of the functional
/// along `P_e` with the EIF averaged over the direction.
///
/// Each step `h` in `step_grid` is taken as `h * step_scale` (see
/// [`CheckReport::step_scale`]), so the quotients see the same curvature on
/// laws with tiny atoms as on balanced ones. Symmetric quotients are used
/// whenever `P_{-h}` keeps positive masses and positivity; otherwise the
/// one-sided quotient from `e = 0` is used.
pub fn pathwise_derivative_check(
    estimand: Estimand,
    base: &FiniteDistribution,
    direction: &FiniteDistribution,
    step_grid: &[f64],
) -> Result<CheckReport> {
    validate_steps(step_grid)?;
    let aligned = aligned_direction(base, direction)?;

    let eif = base.eif(estimand)?;
    let mut eif_integral = 0.0;
    for atom in direction.atoms() {
        eif_integral += atom.mass * eif.eval(&atom.obs)?;
    }

    let at = |e: f64| -> Result<Option<f64>> {
        match perturbed(base, &aligned, e)? {
            Some(d) => d.functional(estimand).map(Some),
            None => Ok(None),
        }
    };

    let scale = step_scale(base, &aligned);
    let steps: Vec<f64> = step_grid.iter().map(|h| h * scale).collect();
    let mut central = Vec::with_capacity(steps.len());
    for &h in &steps {
        let plus = at(h)?.expect("positive step keeps masses positive");
        match at(-h) {
            Ok(Some(minus)) => central.push((plus - minus) / (2.0 * h)),
            // leaving the mixture family can break positivity; fall back
            Ok(None) | Err(Error::PositivityViolation { .. }) | Err(Error::NoTreatedMass) => break,
            Err(e) => return Err(e),
        }
    }

    let (finite_difference, scheme) = if central.len() == steps.len() {
        let xs: Vec<f64> = steps.iter().map(|h| h * h).collect();
        (
            extrapolate_to_zero(&xs, &central),
            DifferenceScheme::Central,
        )
    } else {
        let f0 = base.functional(estimand)?;
        let mut forward = Vec::with_capacity(step_grid.len());
        for &h in &steps {
            let fh = at(h)?.expect("positive step keeps masses positive");
            forward.push((fh - f0) / h);
        }
        (
            extrapolate_to_zero(&steps, &forward),
            DifferenceScheme::Forward,
        )
    };

    Ok(CheckReport {
        estimand,
        finite_difference,
        eif_integral,
        discrepancy: (finite_difference - eif_integral).abs(),
        scheme,
        step_grid: step_grid.to_vec(),
        step_scale: scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_atom() -> FiniteDistribution {
        FiniteDistribution::new(vec![
            Atom::new(vec![0.0], 0, 0.0, 0.25),
            Atom::new(vec![0.0], 1, 0.0, 0.25),
            Atom::new(vec![1.0], 0, 1.0, 0.25),
            Atom::new(vec![1.0], 1, 1.0, 0.25),
        ])
        .unwrap()
    }

    fn point_mass() -> FiniteDistribution {
        FiniteDistribution::new(vec![Atom::new(vec![1.0], 0, 1.0, 1.0)]).unwrap()
    }

    #[test]
    fn mix_endpoints_and_midpoint() {
        let base = four_atom();
        let dir = point_mass();
        let at0 = mix(&SubmodelMix {
            base: &base,
            direction: &dir,
            e: 0.0,
        })
        .unwrap();
        assert_eq!(at0.atoms(), base.atoms());
        let at1 = mix(&SubmodelMix {
            base: &base,
            direction: &dir,
            e: 1.0,
        })
        .unwrap();
        assert_eq!(at1.atoms(), dir.atoms());

        let b = FiniteDistribution::new(vec![
            Atom::new(vec![0.0], 0, 0.0, 0.4),
            Atom::new(vec![1.0], 0, 0.0, 0.6),
        ])
        .unwrap();
        let d = FiniteDistribution::new(vec![
            Atom::new(vec![0.0], 0, 0.0, 0.2),
            Atom::new(vec![1.0], 0, 0.0, 0.8),
        ])
        .unwrap();
        let half = mix(&SubmodelMix {
            base: &b,
            direction: &d,
            e: 0.5,
        })
        .unwrap();
        assert!((half.atoms()[0].mass - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mix_rejects_outside_support() {
        let base = four_atom();
        let dir = FiniteDistribution::new(vec![Atom::new(vec![2.0], 0, 1.0, 1.0)]).unwrap();
        let err = mix(&SubmodelMix {
            base: &base,
            direction: &dir,
            e: 0.3,
        });
        assert!(matches!(err, Err(Error::SupportViolation(_))));
    }

    #[test]
    fn direction_equal_to_base_gives_zero() {
        let base = four_atom();
        for est in [Estimand::Psi, Estimand::Theta] {
            let r = pathwise_derivative_check(est, &base, &base, &DEFAULT_STEP_GRID).unwrap();
            assert!(r.eif_integral.abs() < 1e-15);
            assert!(r.finite_difference.abs() < 1e-9);
        }
    }

    #[test]
    fn point_mass_direction_matches_eif() {
        let base = four_atom();
        let dir = point_mass();
        let r = pathwise_derivative_check(Estimand::Psi, &base, &dir, &DEFAULT_STEP_GRID).unwrap();
        let phi = base.eif_psi(&dir.atoms()[0].obs).unwrap();
        assert_eq!(r.eif_integral, phi);
        assert_eq!(r.scheme, DifferenceScheme::Central);
        assert!(r.discrepancy < 1e-6, "{r:?}");
    }

    #[test]
    fn neville_recovers_two_point_richardson() {
        let h: f64 = 1e-3;
        let (d1, d2) = (2.0, 1.5);
        let got = extrapolate_to_zero(&[h * h, h * h / 4.0], &[d1, d2]);
        assert!((got - (4.0 * d2 - d1) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn bad_step_grid() {
        let base = four_atom();
        for grid in [vec![], vec![5e-4, 1e-3], vec![-1e-3]] {
            assert!(pathwise_derivative_check(Estimand::Psi, &base, &base, &grid).is_err());
        }
    }
}
