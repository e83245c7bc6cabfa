//! Mixture-Wasserstein barycenters of labeled mixtures.
//!
//! The barycenter has `n_components` components with uniform weights. Given
//! the current barycenter, each atom is coupled to it with the supervised
//! mixture-Wasserstein plan; with those plans held fixed the objective is
//! quadratic in the barycenter parameters and is minimized by
//!
//! ```text
//! theta_k = K_B * sum_c lambda_c * sum_j plan_c[k, j] * theta_j^(c)
//! ```
//!
//! for `theta` in `{mu, sigma, label row}`. Alternating the two steps never
//! increases the objective.

use ndarray::Array2;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::DiagGaussian;
use crate::gmm::{Gmm, LabeledGmm};
use crate::ot::smw2_sq;
use crate::simplex::{check_simplex, renormalize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarycenterConfig {
    pub n_components: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl BarycenterConfig {
    pub fn new(n_components: usize) -> Self {
        Self { n_components, max_iters: 50, tol: 1e-5, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_components < 1 {
            return Err(Error::invalid("barycenter needs at least one component"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("fixed-point tolerance must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// A computed barycenter together with the atom couplings that produced its
/// final parameters.
#[derive(Debug, Clone)]
pub struct Barycenter {
    pub model: LabeledGmm,
    /// `plans[c]` is the `K_B x K_c` coupling to atom `c` used in the last update.
    pub plans: Vec<Array2<f64>>,
    /// Objective `sum_c lambda_c SMW2^2(B, P_c)` before every update, plus the
    /// value at the returned barycenter.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl Barycenter {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().expect("history is never empty")
    }
}

fn check_atoms(atoms: &[LabeledGmm]) -> Result<(usize, usize)> {
    let first = atoms.first().ok_or(Error::Empty("atoms"))?;
    let (d, nc) = (first.dim(), first.n_classes());
    for a in atoms {
        if a.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: a.dim() });
        }
        if a.n_classes() != nc {
            return Err(Error::DimensionMismatch { expected: nc, got: a.n_classes() });
        }
    }
    Ok((d, nc))
}

/// Samples one atom by `lambda` and draws barycenter components from it by
/// weight, without replacement until the atom is exhausted. Drawing all
/// components from one atom avoids starting with duplicated modes.
fn initial_components(lambda: &[f64], atoms: &[LabeledGmm], cfg: &BarycenterConfig) -> LabeledGmm {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let atom = &atoms[WeightedIndex::new(lambda).expect("lambda validated").sample(&mut rng)];
    let mut left: Vec<f64> = atom.gmm().weights().to_vec();
    let mut comps = Vec::with_capacity(cfg.n_components);
    let mut labels = Vec::with_capacity(cfg.n_components);
    for _ in 0..cfg.n_components {
        if left.iter().all(|&w| w <= 0.0) {
            left = atom.gmm().weights().to_vec();
        }
        let k = WeightedIndex::new(&left).expect("positive weight remains").sample(&mut rng);
        left[k] = 0.0;
        comps.push(atom.gmm().components()[k].clone());
        labels.push(atom.labels()[k].clone());
    }
    let w = vec![1.0 / cfg.n_components as f64; cfg.n_components];
    LabeledGmm::from_parts(Gmm::from_parts(w, comps), labels)
}

/// Applies the plan-fixed update map to produce barycenter parameters.
pub(crate) fn apply_update(
    lambda: &[f64],
    atoms: &[LabeledGmm],
    plans: &[Array2<f64>],
    n_components: usize,
) -> LabeledGmm {
    let (d, nc) = (atoms[0].dim(), atoms[0].n_classes());
    let kb = n_components as f64;
    let mut mus = vec![vec![0.0; d]; n_components];
    let mut sigmas = vec![vec![0.0; d]; n_components];
    let mut labels = vec![vec![0.0; nc]; n_components];
    for ((&l, atom), plan) in lambda.iter().zip(atoms).zip(plans) {
        if l == 0.0 {
            continue;
        }
        for k in 0..n_components {
            for (j, comp) in atom.gmm().components().iter().enumerate() {
                let w = plan[[k, j]];
                if w == 0.0 {
                    continue;
                }
                let s = kb * l * w;
                for t in 0..d {
                    mus[k][t] += s * comp.mu()[t];
                    sigmas[k][t] += s * comp.sigma()[t];
                }
                for (y, &a) in labels[k].iter_mut().zip(&atom.labels()[j]) {
                    *y += s * a;
                }
            }
        }
    }
    labels.iter_mut().for_each(|row| renormalize(row));
    let comps = mus.into_iter().zip(sigmas).map(|(m, s)| DiagGaussian::from_parts(m, s)).collect();
    let w = vec![1.0 / kb; n_components];
    LabeledGmm::from_parts(Gmm::from_parts(w, comps), labels)
}

fn couple(bary: &LabeledGmm, atoms: &[LabeledGmm], lambda: &[f64], beta: f64) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut objective = 0.0;
    let mut plans = Vec::with_capacity(atoms.len());
    for (atom, &l) in atoms.iter().zip(lambda) {
        let (cost, plan) = smw2_sq(bary, atom, beta)?;
        objective += l * cost;
        plans.push(plan.into_matrix());
    }
    Ok((objective, plans))
}

fn max_param_change(a: &LabeledGmm, b: &LabeledGmm) -> f64 {
    let mut m = 0.0f64;
    for (ca, cb) in a.gmm().components().iter().zip(b.gmm().components()) {
        for (x, y) in ca.mu().iter().zip(cb.mu()).chain(ca.sigma().iter().zip(cb.sigma())) {
            m = m.max((x - y).abs());
        }
    }
    for (ra, rb) in a.labels().iter().zip(b.labels()) {
        for (x, y) in ra.iter().zip(rb) {
            m = m.max((x - y).abs());
        }
    }
    m
}

/// Fixed-point computation of the supervised mixture-Wasserstein barycenter
/// of `atoms` with coordinates `lambda`.
pub fn mixture_barycenter(
    lambda: &[f64],
    atoms: &[LabeledGmm],
    cfg: &BarycenterConfig,
    beta: f64,
) -> Result<Barycenter> {
    cfg.validate()?;
    check_atoms(atoms)?;
    if lambda.len() != atoms.len() {
        return Err(Error::DimensionMismatch { expected: atoms.len(), got: lambda.len() });
    }
    check_simplex(lambda, "barycentric coordinates")?;

    let mut bary = initial_components(lambda, atoms, cfg);
    let mut history = Vec::new();
    let mut plans;
    let mut iterations = 0;
    loop {
        let (objective, current) = couple(&bary, atoms, lambda, beta)?;
        history.push(objective);
        plans = current;
        let next = apply_update(lambda, atoms, &plans, cfg.n_components);
        iterations += 1;
        let change = max_param_change(&bary, &next);
        bary = next;
        if change < cfg.tol || iterations >= cfg.max_iters.max(1) {
            break;
        }
    }
    let (final_objective, _) = couple(&bary, atoms, lambda, beta)?;
    history.push(final_objective);
    Ok(Barycenter { model: bary, plans, objective_history: history, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::mw2_sq;
    use crate::simplex::one_hot;

    fn atom(mus: &[f64], sigmas: &[f64], classes: &[usize], nc: usize) -> LabeledGmm {
        let k = mus.len();
        let comps = mus
            .iter()
            .zip(sigmas)
            .map(|(&m, &s)| DiagGaussian::new(vec![m, -m], vec![s, 2.0 * s]).unwrap())
            .collect();
        LabeledGmm::new(
            Gmm::new(vec![1.0 / k as f64; k], comps).unwrap(),
            classes.iter().map(|&c| one_hot(nc, c)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn self_barycenter_recovers_atom() {
        let a = atom(&[0.0, 3.0, 7.0, -4.0], &[1.0, 0.5, 2.0, 1.5], &[0, 1, 2, 0], 3);
        for seed in 0..10 {
            let cfg = BarycenterConfig { seed, ..BarycenterConfig::new(4) };
            let b = mixture_barycenter(&[1.0], std::slice::from_ref(&a), &cfg, 5.0).unwrap();
            assert!(b.objective() < 1e-12);
            assert!(mw2_sq(b.model.gmm(), a.gmm()).unwrap().0 < 1e-12);
        }
    }

    #[test]
    fn identical_atoms_give_that_atom() {
        let a = atom(&[0.0, 5.0], &[1.0, 2.0], &[0, 1], 2);
        let b = mixture_barycenter(&[0.3, 0.7], &[a.clone(), a.clone()], &BarycenterConfig::new(2), 1.0).unwrap();
        assert!(b.objective() < 1e-12);
    }

    #[test]
    fn two_single_gaussians_average_parameters() {
        let p = LabeledGmm::new(Gmm::single(DiagGaussian::new(vec![0.0], vec![1.0]).unwrap()), vec![vec![1.0]]).unwrap();
        let q = LabeledGmm::new(Gmm::single(DiagGaussian::new(vec![4.0], vec![3.0]).unwrap()), vec![vec![1.0]]).unwrap();
        let b = mixture_barycenter(&[0.5, 0.5], &[p, q], &BarycenterConfig::new(1), 0.0).unwrap();
        let c = &b.model.gmm().components()[0];
        assert!((c.mu()[0] - 2.0).abs() < 1e-12 && (c.sigma()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn objective_never_increases_and_stays_in_hull() {
        let atoms = vec![
            atom(&[0.0, 4.0, 9.0], &[1.0, 1.0, 2.0], &[0, 1, 1], 2),
            atom(&[1.0, 6.0, 7.5], &[0.5, 1.5, 1.0], &[0, 0, 1], 2),
            atom(&[-2.0, 3.0, 11.0], &[2.0, 0.7, 0.9], &[1, 0, 1], 2),
        ];
        for seed in 0..20 {
            let cfg = BarycenterConfig { seed, ..BarycenterConfig::new(4) };
            let b = mixture_barycenter(&[0.2, 0.5, 0.3], &atoms, &cfg, 3.0).unwrap();
            for w in b.objective_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-7, "{:?}", b.objective_history);
            }
            for row in b.model.labels() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&y| y >= 0.0));
            }
            let all: Vec<&DiagGaussian> = atoms.iter().flat_map(|a| a.gmm().components()).collect();
            for c in b.model.gmm().components() {
                for t in 0..2 {
                    let lo = all.iter().map(|a| a.mu()[t]).fold(f64::INFINITY, f64::min);
                    let hi = all.iter().map(|a| a.mu()[t]).fold(f64::NEG_INFINITY, f64::max);
                    assert!(c.mu()[t] >= lo - 1e-12 && c.mu()[t] <= hi + 1e-12);
                    let lo = all.iter().map(|a| a.sigma()[t]).fold(f64::INFINITY, f64::min);
                    let hi = all.iter().map(|a| a.sigma()[t]).fold(f64::NEG_INFINITY, f64::max);
                    assert!(c.sigma()[t] >= lo - 1e-12 && c.sigma()[t] <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn one_hot_lambda_copies_selected_atom() {
        let atoms = vec![
            atom(&[0.0, 4.0, 9.0], &[1.0, 1.0, 2.0], &[0, 1, 1], 2),
            atom(&[1.0, 6.0, 7.5], &[0.5, 1.5, 1.0], &[0, 0, 1], 2),
        ];
        let b = mixture_barycenter(&[0.0, 1.0], &atoms, &BarycenterConfig::new(3), 2.0).unwrap();
        assert!(mw2_sq(b.model.gmm(), atoms[1].gmm()).unwrap().0 < 1e-8);
    }

    #[test]
    fn returned_model_is_update_of_stored_plans() {
        let atoms = vec![
            atom(&[0.0, 4.0], &[1.0, 1.0], &[0, 1], 2),
            atom(&[1.0, 6.0], &[0.5, 1.5], &[0, 1], 2),
        ];
        let lambda = [0.4, 0.6];
        let b = mixture_barycenter(&lambda, &atoms, &BarycenterConfig::new(2), 1.0).unwrap();
        assert_eq!(apply_update(&lambda, &atoms, &b.plans, 2), b.model);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = atom(&[0.0], &[1.0], &[0], 1);
        let cfg = BarycenterConfig::new(1);
        assert!(mixture_barycenter(&[0.5], &[a.clone()], &cfg, 1.0).is_err());
        assert!(mixture_barycenter(&[], &[], &cfg, 1.0).is_err());
        assert!(mixture_barycenter(&[1.0], &[a.clone()], &BarycenterConfig::new(0), 1.0).is_err());
        assert!(mixture_barycenter(&[1.0], &[a], &cfg, -1.0).is_err());
    }
}
