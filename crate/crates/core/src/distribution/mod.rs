//! Exact computation on finite-support laws of `(W, A, Y)`.
//!
//! Every expectation here is a finite sum over atoms, so the estimands
//! `psi = E[E(Y|W,A=0)]` and `theta = E[E(Y|W,A=0) | A=1]`, the nuisance
//! functions `q(w) = E(Y|W=w,A=0)` and `g(w) = Pr(A=0|W=w)`, and the
//! efficient influence functions of both estimands are computed exactly
//! (up to floating-point rounding). These serve as ground truth for the
//! identity checks in [`crate::vonmises`] and for the pathwise-derivative
//! check in [`pathwise`].

pub mod pathwise;

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{canonical, CovKey, Dataset, Observation};
use crate::error::{Error, Result};

pub use pathwise::{mix, pathwise_derivative_check, CheckReport, SubmodelMix, DEFAULT_STEP_GRID};

/// Tolerance on the total mass of a distribution.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Which target functional is being estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    /// Mean untreated outcome, `E[E(Y|W,A=0)]`.
    Psi,
    /// Mean untreated outcome among the treated, `E[E(Y|W,A=0)|A=1]`.
    Theta,
}

impl std::fmt::Display for Estimand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Estimand::Psi => f.write_str("psi"),
            Estimand::Theta => f.write_str("theta"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    #[serde(flatten)]
    pub obs: Observation,
    #[serde(rename = "p")]
    pub mass: f64,
}

impl Atom {
    pub fn new(w: Vec<f64>, a: u8, y: f64, mass: f64) -> Self {
        Atom {
            obs: Observation { w, a, y },
            mass,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Stratum {
    w: Vec<f64>,
    mass: f64,
    untreated_mass: f64,
    treated_mass: f64,
    // sum of mass * y over the A=0 atoms
    untreated_y: f64,
}

/// Exact joint law of `(W, A, Y)` on finitely many atoms.
#[derive(Debug, Clone)]
pub struct FiniteDistribution {
    atoms: Vec<Atom>,
    strata: BTreeMap<CovKey, Stratum>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct DistributionDoc {
    atoms: Vec<Atom>,
}

pub(crate) fn atom_key(o: &Observation) -> (CovKey, u8, u64) {
    (CovKey::new(&o.w), o.a, canonical(o.y).to_bits())
}

impl FiniteDistribution {
    /// Validates and indexes a list of atoms.
    ///
    /// Masses must lie in `(0, 1]` and sum to one within [`MASS_TOLERANCE`];
    /// atoms must be distinct and share one covariate dimension.
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidDistribution("no atoms".into()));
        }
        let dim = atoms[0].obs.w.len();
        let mut seen = HashSet::with_capacity(atoms.len());
        let mut total = 0.0;
        for atom in &atoms {
            atom.obs.validate()?;
            if atom.obs.w.len() != dim {
                return Err(Error::InvalidDistribution(format!(
                    "atom covariate dimension {} differs from {dim}",
                    atom.obs.w.len()
                )));
            }
            if !(atom.mass > 0.0 && atom.mass <= 1.0) {
                return Err(Error::InvalidDistribution(format!(
                    "atom mass {} outside (0, 1]",
                    atom.mass
                )));
            }
            if !seen.insert(atom_key(&atom.obs)) {
                return Err(Error::InvalidDistribution(format!(
                    "duplicate atom {:?}",
                    atom.obs
                )));
            }
            total += atom.mass;
        }
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "masses sum to {total}, not 1"
            )));
        }
        Ok(Self::index(atoms, dim))
    }

    fn index(atoms: Vec<Atom>, dim: usize) -> Self {
        let mut strata: BTreeMap<CovKey, Stratum> = BTreeMap::new();
        for atom in &atoms {
            let s = strata
                .entry(CovKey::new(&atom.obs.w))
                .or_insert_with(|| Stratum {
                    w: atom.obs.w.clone(),
                    ..Stratum::default()
                });
            s.mass += atom.mass;
            if atom.obs.untreated() {
                s.untreated_mass += atom.mass;
                s.untreated_y += atom.mass * atom.obs.y;
            } else {
                s.treated_mass += atom.mass;
            }
        }
        FiniteDistribution { atoms, strata, dim }
    }

    /// Empirical distribution of a sample: each distinct row gets mass count/n.
    pub fn empirical(data: &Dataset) -> Result<Self> {
        let n = data.n() as f64;
        let mut index: HashMap<(CovKey, u8, u64), usize> = HashMap::new();
        // first-occurrence order keeps the atom list stable
        let mut counts: Vec<(Observation, usize)> = Vec::new();
        for row in data {
            match index.entry(atom_key(row)) {
                Entry::Occupied(e) => counts[*e.get()].1 += 1,
                Entry::Vacant(e) => {
                    e.insert(counts.len());
                    counts.push((row.clone(), 1));
                }
            }
        }
        let atoms = counts
            .into_iter()
            .map(|(obs, c)| Atom {
                obs,
                mass: c as f64 / n,
            })
            .collect();
        FiniteDistribution::new(atoms)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Distinct covariate values with their marginal masses `Pr(W=w)`.
    pub fn covariate_support(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.strata.values().map(|s| (s.w.as_slice(), s.mass))
    }

    pub fn contains_atom(&self, o: &Observation) -> bool {
        let key = atom_key(o);
        self.atoms.iter().any(|a| atom_key(&a.obs) == key)
    }

    fn stratum(&self, w: &[f64]) -> Option<&Stratum> {
        self.strata.get(&CovKey::new(w))
    }

    /// `Pr(W = w)`.
    pub fn marginal(&self, w: &[f64]) -> f64 {
        self.stratum(w).map_or(0.0, |s| s.mass)
    }

    /// `Pr(W = w, A = 0)`.
    pub fn joint_untreated(&self, w: &[f64]) -> f64 {
        self.stratum(w).map_or(0.0, |s| s.untreated_mass)
    }

    /// `Pr(A = 1)`.
    pub fn pr_treated(&self) -> f64 {
        self.atoms
            .iter()
            .filter(|a| a.obs.treated())
            .map(|a| a.mass)
            .sum()
    }

    /// `q(w) = E(Y | W=w, A=0)`.
    pub fn q_of(&self, w: &[f64]) -> Result<f64> {
        match self.stratum(w) {
            Some(s) if s.untreated_mass > 0.0 => Ok(s.untreated_y / s.untreated_mass),
            _ => Err(Error::ZeroMassConditioning { w: w.to_vec() }),
        }
    }

    /// `g(w) = Pr(A=0 | W=w)`.
    pub fn g_of(&self, w: &[f64]) -> Result<f64> {
        match self.stratum(w) {
            Some(s) if s.mass > 0.0 => Ok(s.untreated_mass / s.mass),
            _ => Err(Error::ZeroMassConditioning { w: w.to_vec() }),
        }
    }

    /// `psi = sum_w q(w) Pr(W=w)`.
    pub fn psi(&self) -> Result<f64> {
        let mut total = 0.0;
        for s in self.strata.values() {
            if s.untreated_mass <= 0.0 {
                return Err(Error::PositivityViolation { w: s.w.clone() });
            }
            total += s.untreated_y / s.untreated_mass * s.mass;
        }
        Ok(total)
    }

    /// `theta = sum_w q(w) Pr(W=w | A=1)`.
    pub fn theta(&self) -> Result<f64> {
        let pr1 = self.pr_treated();
        if pr1 <= 0.0 {
            return Err(Error::NoTreatedMass);
        }
        let mut total = 0.0;
        for s in self.strata.values() {
            if s.treated_mass <= 0.0 {
                continue;
            }
            if s.untreated_mass <= 0.0 {
                return Err(Error::PositivityViolation { w: s.w.clone() });
            }
            total += s.untreated_y / s.untreated_mass * (s.treated_mass / pr1);
        }
        Ok(total)
    }

    pub fn functional(&self, estimand: Estimand) -> Result<f64> {
        match estimand {
            Estimand::Psi => self.psi(),
            Estimand::Theta => self.theta(),
        }
    }

    /// EIF of `psi` at `o`: `I(a=0)/g(w) (y - q(w)) + q(w) - psi`.
    pub fn eif_psi(&self, o: &Observation) -> Result<f64> {
        self.eif(Estimand::Psi)?.eval(o)
    }

    /// EIF of `theta` at `o`:
    /// `I(a=0)/Pr(A=1) (1-g)/g (y - q) + I(a=1)/Pr(A=1) (q - theta)`.
    pub fn eif_theta(&self, o: &Observation) -> Result<f64> {
        self.eif(Estimand::Theta)?.eval(o)
    }

    /// Precomputes the estimand (and `Pr(A=1)`) so the EIF can be evaluated
    /// at many points cheaply.
    pub fn eif(&self, estimand: Estimand) -> Result<Eif<'_>> {
        let value = self.functional(estimand)?;
        Ok(Eif {
            dist: self,
            estimand,
            value,
            pr_treated: self.pr_treated(),
        })
    }

    /// `E_P[f(O)]` as an exact sum over atoms.
    pub fn expectation<F: FnMut(&Observation) -> f64>(&self, mut f: F) -> f64 {
        self.atoms.iter().map(|a| a.mass * f(&a.obs)).sum()
    }

    /// Draws `n` iid observations by inverse-CDF sampling over atoms.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        let mut cumulative = Vec::with_capacity(self.atoms.len());
        let mut acc = 0.0;
        for atom in &self.atoms {
            acc += atom.mass;
            cumulative.push(acc);
        }
        let rows = (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                let idx = cumulative
                    .partition_point(|&c| c <= u)
                    .min(self.atoms.len() - 1);
                self.atoms[idx].obs.clone()
            })
            .collect();
        Dataset::new(rows)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: DistributionDoc = serde_json::from_str(s)?;
        FiniteDistribution::new(doc.atoms)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&DistributionDoc {
            atoms: self.atoms.clone(),
        })?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

impl crate::learners::NuisanceTruth for FiniteDistribution {
    /// NaN off the untreated support; oracle learners built on a finite law
    /// are only evaluated on its support.
    fn q(&self, w: &[f64]) -> f64 {
        self.q_of(w).unwrap_or(f64::NAN)
    }

    fn g(&self, w: &[f64]) -> f64 {
        self.g_of(w).unwrap_or(f64::NAN)
    }

    /// Smallest `w1` whose marginal CDF reaches one half.
    fn median_w1(&self) -> f64 {
        let mut marg: Vec<(f64, f64)> = self
            .covariate_support()
            .map(|(w, p)| (w.first().copied().unwrap_or(0.0), p))
            .collect();
        marg.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        for &(w1, p) in &marg {
            acc += p;
            if acc >= 0.5 - MASS_TOLERANCE {
                return w1;
            }
        }
        marg.last().map_or(0.0, |m| m.0)
    }
}

/// `psi(P)` for a finite-support law.
pub fn psi_of(dist: &FiniteDistribution) -> Result<f64> {
    dist.psi()
}

/// `theta(P)` for a finite-support law.
pub fn theta_of(dist: &FiniteDistribution) -> Result<f64> {
    dist.theta()
}

/// The true EIF of one estimand under a fixed distribution.
#[derive(Debug, Clone, Copy)]
pub struct Eif<'a> {
    dist: &'a FiniteDistribution,
    estimand: Estimand,
    value: f64,
    pr_treated: f64,
}

impl Eif<'_> {
    /// The estimand value the EIF is centred at.
    pub fn estimand_value(&self) -> f64 {
        self.value
    }

    pub fn eval(&self, o: &Observation) -> Result<f64> {
        let s = self
            .dist
            .stratum(&o.w)
            .ok_or_else(|| Error::ZeroMassConditioning { w: o.w.clone() })?;
        let g = s.untreated_mass / s.mass;
        match self.estimand {
            Estimand::Psi => {
                if s.untreated_mass <= 0.0 {
                    return Err(Error::PositivityViolation { w: o.w.clone() });
                }
                let q = s.untreated_y / s.untreated_mass;
                let residual = if o.untreated() { (o.y - q) / g } else { 0.0 };
                Ok(residual + q - self.value)
            }
            Estimand::Theta => {
                if s.untreated_mass <= 0.0 {
                    return Err(Error::PositivityViolation { w: o.w.clone() });
                }
                let q = s.untreated_y / s.untreated_mass;
                let p1 = self.pr_treated;
                if o.untreated() {
                    Ok((1.0 - g) / g * (o.y - q) / p1)
                } else {
                    Ok((q - self.value) / p1)
                }
            }
        }
    }
}
