//! Random finite laws and table nuisances shared by the integration tests.
#![allow(dead_code)]

use eifkit::data::CovKey;
use eifkit::distribution::Atom;
use eifkit::learners::FittedNuisance;
use eifkit::FiniteDistribution;
use rand::Rng;
use std::collections::HashMap;

/// A law on 2..=5 covariate points, each carrying 1-2 untreated and 1-2
/// treated atoms (at most 20 atoms), with `g` in [0.1, 0.9].
pub fn random_law<R: Rng>(rng: &mut R) -> FiniteDistribution {
    let d = rng.random_range(1..=2);
    let k = rng.random_range(2..=5);
    let pw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = pw.iter().sum();
    let mut atoms = Vec::new();
    for (i, &m) in pw.iter().enumerate() {
        let mut w = vec![i as f64 - 1.5];
        if d == 2 {
            w.push((rng.random_range(-20..20) as f64) / 10.0);
        }
        let m = m / total;
        let g = rng.random_range(0.1..0.9);
        for (a, share) in [(0u8, g), (1u8, 1.0 - g)] {
            let count = rng.random_range(1..=2);
            let split: Vec<f64> = (0..count).map(|_| rng.random_range(0.2..1.0)).collect();
            let s: f64 = split.iter().sum();
            for (j, part) in split.iter().enumerate() {
                // distinct outcomes keep atoms distinct
                let y = rng.random_range(-3.0..3.0) + 10.0 * j as f64;
                atoms.push(Atom::new(w.clone(), a, y, m * share * part / s));
            }
        }
    }
    FiniteDistribution::new(atoms).expect("valid random law")
}

/// A law whose treatment is independent of `W`.
pub fn independent_law<R: Rng>(rng: &mut R) -> FiniteDistribution {
    let p0 = rng.random_range(0.1..0.9);
    let k = rng.random_range(2..=5);
    let pw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = pw.iter().sum();
    let mut atoms = Vec::new();
    for (i, m) in pw.iter().enumerate() {
        let w = vec![i as f64];
        let y = rng.random_range(-3.0..3.0);
        atoms.push(Atom::new(w.clone(), 0, y, m / total * p0));
        atoms.push(Atom::new(w, 1, y + 1.0, m / total * (1.0 - p0)));
    }
    FiniteDistribution::new(atoms).expect("valid law")
}

/// A direction supported on a random nonempty subset of `base`'s atoms.
pub fn random_direction<R: Rng>(base: &FiniteDistribution, rng: &mut R) -> FiniteDistribution {
    let mut atoms = Vec::new();
    for a in base.atoms() {
        if rng.random_bool(0.6) {
            atoms.push(Atom {
                obs: a.obs.clone(),
                mass: rng.random_range(0.05..1.0),
            });
        }
    }
    if atoms.is_empty() {
        let a = &base.atoms()[rng.random_range(0..base.atoms().len())];
        atoms.push(Atom {
            obs: a.obs.clone(),
            mass: 1.0,
        });
    }
    let total: f64 = atoms.iter().map(|a| a.mass).sum();
    for a in &mut atoms {
        a.mass /= total;
    }
    FiniteDistribution::new(atoms).expect("valid direction")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exact {
    Neither,
    Outcome,
    Propensity,
}

/// Nuisances given by lookup tables on the support of `p`: the truth plus
/// random errors, except for the component named by `exact`.
pub fn random_nuisance<R: Rng>(
    p: &FiniteDistribution,
    exact: Exact,
    rng: &mut R,
) -> FittedNuisance {
    let mut q_table = HashMap::new();
    let mut g_table = HashMap::new();
    for (w, _) in p.covariate_support() {
        let (q, g) = (p.q_of(w).unwrap(), p.g_of(w).unwrap());
        let q_hat = if exact == Exact::Outcome {
            q
        } else {
            q + rng.random_range(-1.0..1.0)
        };
        let g_hat = if exact == Exact::Propensity {
            g
        } else {
            (g + rng.random_range(-0.3..0.3)).clamp(0.05, 0.95)
        };
        q_table.insert(CovKey::new(w), q_hat);
        g_table.insert(CovKey::new(w), g_hat);
    }
    table_nuisance(q_table, g_table)
}

pub fn exact_nuisance(p: &FiniteDistribution) -> FittedNuisance {
    let mut q_table = HashMap::new();
    let mut g_table = HashMap::new();
    for (w, _) in p.covariate_support() {
        q_table.insert(CovKey::new(w), p.q_of(w).unwrap());
        g_table.insert(CovKey::new(w), p.g_of(w).unwrap());
    }
    table_nuisance(q_table, g_table)
}

pub fn table_nuisance(q: HashMap<CovKey, f64>, g: HashMap<CovKey, f64>) -> FittedNuisance {
    FittedNuisance::from_fns(
        move |w: &[f64]| q.get(&CovKey::new(w)).copied().unwrap_or(f64::NAN),
        move |w: &[f64]| g.get(&CovKey::new(w)).copied().unwrap_or(f64::NAN),
        0.01,
    )
    .expect("valid truncation")
}

/// `psi` of a law computed straight from its atoms, without the library's
/// nuisance helpers.
pub fn psi_by_hand(p: &FiniteDistribution) -> f64 {
    let mut cells: HashMap<CovKey, (f64, f64, f64)> = HashMap::new();
    for a in p.atoms() {
        let e = cells.entry(CovKey::new(&a.obs.w)).or_default();
        e.0 += a.mass;
        if a.obs.a == 0 {
            e.1 += a.mass;
            e.2 += a.mass * a.obs.y;
        }
    }
    cells.values().map(|(pw, p0, s0)| pw * s0 / p0).sum()
}

/// `theta` of a law computed straight from its atoms.
pub fn theta_by_hand(p: &FiniteDistribution) -> f64 {
    let mut cells: HashMap<CovKey, (f64, f64, f64)> = HashMap::new();
    for a in p.atoms() {
        let e = cells.entry(CovKey::new(&a.obs.w)).or_default();
        if a.obs.a == 1 {
            e.0 += a.mass;
        } else {
            e.1 += a.mass;
            e.2 += a.mass * a.obs.y;
        }
    }
    let p1: f64 = cells.values().map(|c| c.0).sum();
    cells.values().map(|(m1, p0, s0)| m1 * s0 / p0).sum::<f64>() / p1
}

/// Convex mixture built directly from atom lists.
pub fn mix_by_hand(
    base: &FiniteDistribution,
    dir: &FiniteDistribution,
    e: f64,
) -> FiniteDistribution {
    let mut atoms: Vec<Atom> = base
        .atoms()
        .iter()
        .map(|a| Atom {
            obs: a.obs.clone(),
            mass: (1.0 - e) * a.mass,
        })
        .collect();
    for d in dir.atoms() {
        let slot = atoms
            .iter_mut()
            .find(|a| a.obs == d.obs)
            .expect("direction inside base support");
        slot.mass += e * d.mass;
    }
    FiniteDistribution::new(atoms).expect("valid mixture")
}
