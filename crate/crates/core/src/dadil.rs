//! Dictionary learning over labeled Gaussian mixtures.
//!
//! Every domain (the sources, then the target) is reconstructed as a
//! mixture-Wasserstein barycenter of shared learnable atoms, with one row of
//! barycentric coordinates per domain. The loss is
//!
//! ```text
//! MW2^2(Q_T, B(lambda_T)) + sum_l SMW2^2(Q_l, B(lambda_l))
//! ```
//!
//! Gradients hold every transport plan fixed: the coupling between each
//! domain and its reconstruction, and the atom couplings used by the final
//! barycenter update. What remains is quadratic in the atom parameters and
//! linear-then-quadratic in the coordinates, so the gradient is exact
//! wherever the plans are locally constant.

use std::time::Instant;

use ndarray::ArrayView2;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::barycenter::{mixture_barycenter, BarycenterConfig};
use crate::error::{Error, Result};
use crate::gaussian::{DiagGaussian, VAR_FLOOR_REL};
use crate::gmm::{accuracy, Gmm, LabeledGmm};
use crate::online::{Batch, StreamConfig, StreamState};
use crate::ot::{mw2_sq, smw2_sq};
use crate::simplex::{argmax, check_simplex, project_simplex};

/// Atoms plus one row of barycentric coordinates per domain; the last row
/// belongs to the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub(crate) atoms: Vec<LabeledGmm>,
    pub(crate) lambda: Vec<Vec<f64>>,
    pub(crate) sigma_floor: Vec<f64>,
}

impl Dictionary {
    pub fn new(atoms: Vec<LabeledGmm>, lambda: Vec<Vec<f64>>, sigma_floor: Vec<f64>) -> Result<Self> {
        let first = atoms.first().ok_or(Error::Empty("dictionary atoms"))?;
        let (d, k, nc) = (first.dim(), first.k(), first.n_classes());
        for a in &atoms {
            if a.dim() != d || a.k() != k || a.n_classes() != nc {
                return Err(Error::invalid("atoms must share dimension, component count and class count"));
            }
        }
        if lambda.len() < 2 {
            return Err(Error::invalid("need coordinate rows for at least one source and the target"));
        }
        for (i, row) in lambda.iter().enumerate() {
            if row.len() != atoms.len() {
                return Err(Error::DimensionMismatch { expected: atoms.len(), got: row.len() });
            }
            check_simplex(row, &format!("coordinate row {i}"))?;
        }
        if sigma_floor.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: sigma_floor.len() });
        }
        Ok(Self { atoms, lambda, sigma_floor })
    }

    pub fn atoms(&self) -> &[LabeledGmm] {
        &self.atoms
    }

    pub fn lambda(&self) -> &[Vec<f64>] {
        &self.lambda
    }

    pub fn target_lambda(&self) -> &[f64] {
        self.lambda.last().expect("at least two rows")
    }

    pub fn sigma_floor(&self) -> &[f64] {
        &self.sigma_floor
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn n_components(&self) -> usize {
        self.atoms[0].k()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].dim()
    }

    pub fn n_classes(&self) -> usize {
        self.atoms[0].n_classes()
    }

    pub fn n_sources(&self) -> usize {
        self.lambda.len() - 1
    }

    pub(crate) fn atoms_mut(&mut self) -> &mut [LabeledGmm] {
        &mut self.atoms
    }

    pub(crate) fn lambda_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.lambda
    }
}

/// Optimization settings for dictionary learning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DadilConfig {
    /// Weight of the label term in the supervised ground cost.
    pub beta: f64,
    pub lr_atoms: f64,
    pub lr_lambda: f64,
    pub max_halvings: usize,
    pub barycenter_iters: usize,
    pub barycenter_tol: f64,
    pub seed: u64,
}

impl DadilConfig {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            lr_atoms: 1.0,
            lr_lambda: 0.01,
            max_halvings: 10,
            barycenter_iters: 50,
            barycenter_tol: 1e-5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be finite and nonnegative, got {}", self.beta)));
        }
        if !(self.lr_atoms > 0.0 && self.lr_lambda > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        Ok(())
    }

    fn barycenter(&self, n_components: usize, domain: usize) -> BarycenterConfig {
        BarycenterConfig {
            n_components,
            max_iters: self.barycenter_iters,
            tol: self.barycenter_tol,
            seed: self.seed.wrapping_add(domain as u64),
        }
    }
}

/// Per-domain terms of the dictionary loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Unsupervised `MW2^2` between the target mixture and its reconstruction.
    pub target: f64,
    /// Supervised `SMW2^2` per source.
    pub sources: Vec<f64>,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.target + self.sources.iter().sum::<f64>()
    }
}

/// Gradient of the loss, shaped like the dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryGradient {
    /// `[atom][component][dim]`
    pub mu: Vec<Vec<Vec<f64>>>,
    pub sigma: Vec<Vec<Vec<f64>>>,
    /// `[atom][component][class]`
    pub labels: Vec<Vec<Vec<f64>>>,
    /// `[domain][atom]`
    pub lambda: Vec<Vec<f64>>,
}

impl DictionaryGradient {
    fn zeros(dict: &Dictionary) -> Self {
        let (c, k, d, nc) = (dict.n_atoms(), dict.n_components(), dict.dim(), dict.n_classes());
        Self {
            mu: vec![vec![vec![0.0; d]; k]; c],
            sigma: vec![vec![vec![0.0; d]; k]; c],
            labels: vec![vec![vec![0.0; nc]; k]; c],
            lambda: vec![vec![0.0; c]; dict.lambda.len()],
        }
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        let nested = |v: &'_ Vec<Vec<Vec<f64>>>| v.iter().flatten().flatten().copied().collect::<Vec<_>>();
        nested(&self.mu)
            .into_iter()
            .chain(nested(&self.sigma))
            .chain(nested(&self.labels))
            .chain(self.lambda.iter().flatten().copied())
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

/// A domain mixture as seen by the loss: labeled for sources, unlabeled for the target.
enum DomainRef<'a> {
    Source(&'a LabeledGmm),
    Target(&'a Gmm),
}

fn check_domains(dict: &Dictionary, sources: &[LabeledGmm], target: &Gmm) -> Result<()> {
    if sources.len() != dict.n_sources() {
        return Err(Error::DimensionMismatch { expected: dict.n_sources(), got: sources.len() });
    }
    for s in sources {
        if s.dim() != dict.dim() {
            return Err(Error::DimensionMismatch { expected: dict.dim(), got: s.dim() });
        }
        if s.n_classes() != dict.n_classes() {
            return Err(Error::DimensionMismatch { expected: dict.n_classes(), got: s.n_classes() });
        }
    }
    if target.dim() != dict.dim() {
        return Err(Error::DimensionMismatch { expected: dict.dim(), got: target.dim() });
    }
    Ok(())
}

/// Result of evaluating the loss, optionally with its gradient.
struct Evaluation {
    loss: LossBreakdown,
    grad: Option<DictionaryGradient>,
    target_reconstruction: LabeledGmm,
}

fn evaluate(
    dict: &Dictionary,
    sources: &[LabeledGmm],
    target: &Gmm,
    cfg: &DadilConfig,
    with_grad: bool,
) -> Result<Evaluation> {
    check_domains(dict, sources, target)?;
    let kb = dict.n_components();
    let mut grad = with_grad.then(|| DictionaryGradient::zeros(dict));
    let mut source_terms = Vec::with_capacity(sources.len());
    let mut target_term = 0.0;
    let mut target_reconstruction = None;

    let domains = sources.iter().map(DomainRef::Source).chain(std::iter::once(DomainRef::Target(target)));
    for (l, domain) in domains.enumerate() {
        let lambda = &dict.lambda[l];
        let bary = mixture_barycenter(lambda, &dict.atoms, &cfg.barycenter(kb, l), cfg.beta)?;
        let b = &bary.model;
        let (value, plan, q_gmm, q_labels) = match domain {
            DomainRef::Source(q) => {
                let (v, p) = smw2_sq(q, b, cfg.beta)?;
                (v, p, q.gmm(), Some(q.labels()))
            }
            DomainRef::Target(q) => {
                let (v, p) = mw2_sq(q, b.gmm())?;
                (v, p, q, None)
            }
        };
        match domain {
            DomainRef::Source(_) => source_terms.push(value),
            DomainRef::Target(_) => target_term = value,
        }

        if let Some(g) = grad.as_mut() {
            // dL/dB for every barycenter component, plans fixed
            let gamma = plan.matrix();
            let d = dict.dim();
            let nc = dict.n_classes();
            let mut g_mu = vec![vec![0.0; d]; kb];
            let mut g_sigma = vec![vec![0.0; d]; kb];
            let mut g_y = vec![vec![0.0; nc]; kb];
            for (i, qc) in q_gmm.components().iter().enumerate() {
                for k in 0..kb {
                    let w = gamma[[i, k]];
                    if w == 0.0 {
                        continue;
                    }
                    let bc = &b.gmm().components()[k];
                    for t in 0..d {
                        g_mu[k][t] += 2.0 * w * (bc.mu()[t] - qc.mu()[t]);
                        g_sigma[k][t] += 2.0 * w * (bc.sigma()[t] - qc.sigma()[t]);
                    }
                    if let Some(ql) = q_labels {
                        for j in 0..nc {
                            g_y[k][j] += 2.0 * cfg.beta * w * (b.labels()[k][j] - ql[i][j]);
                        }
                    }
                }
            }
            // chain through B_k = K_B * sum_c lambda_c sum_j omega_c[k, j] theta_cj
            for (c, (atom, omega)) in dict.atoms.iter().zip(&bary.plans).enumerate() {
                let mut dlambda = 0.0;
                for (j, ac) in atom.gmm().components().iter().enumerate() {
                    for k in 0..kb {
                        let w = omega[[k, j]];
                        if w == 0.0 {
                            continue;
                        }
                        let s = kb as f64 * w;
                        for t in 0..d {
                            g.mu[c][j][t] += s * lambda[c] * g_mu[k][t];
                            g.sigma[c][j][t] += s * lambda[c] * g_sigma[k][t];
                            dlambda += s * (g_mu[k][t] * ac.mu()[t] + g_sigma[k][t] * ac.sigma()[t]);
                        }
                        for y in 0..nc {
                            g.labels[c][j][y] += s * lambda[c] * g_y[k][y];
                            dlambda += s * g_y[k][y] * atom.labels()[j][y];
                        }
                    }
                }
                g.lambda[l][c] += dlambda;
            }
        }
        if matches!(domain, DomainRef::Target(_)) {
            target_reconstruction = Some(bary.model);
        }
    }

    Ok(Evaluation {
        loss: LossBreakdown { target: target_term, sources: source_terms },
        grad,
        target_reconstruction: target_reconstruction.expect("target is always evaluated"),
    })
}

/// Dictionary loss.
pub fn dadil_loss(dict: &Dictionary, sources: &[LabeledGmm], target: &Gmm, cfg: &DadilConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    Ok(evaluate(dict, sources, target, cfg, false)?.loss)
}

/// Dictionary loss and its plan-fixed gradient.
pub fn dadil_gradient(
    dict: &Dictionary,
    sources: &[LabeledGmm],
    target: &Gmm,
    cfg: &DadilConfig,
) -> Result<(LossBreakdown, DictionaryGradient)> {
    cfg.validate()?;
    let ev = evaluate(dict, sources, target, cfg, true)?;
    Ok((ev.loss, ev.grad.expect("requested")))
}

/// Projected gradient update with step scale `scale`.
fn descend(dict: &Dictionary, g: &DictionaryGradient, cfg: &DadilConfig, scale: f64) -> Dictionary {
    let mut next = dict.clone();
    let (lr_a, lr_l) = (cfg.lr_atoms * scale, cfg.lr_lambda * scale);
    let floor = dict.sigma_floor.clone();
    for (c, atom) in next.atoms_mut().iter_mut().enumerate() {
        for (j, comp) in atom.gmm_mut().components_mut().iter_mut().enumerate() {
            for (m, gm) in comp.mu_mut().iter_mut().zip(&g.mu[c][j]) {
                *m -= lr_a * gm;
            }
            for (s, gs) in comp.sigma_mut().iter_mut().zip(&g.sigma[c][j]) {
                *s -= lr_a * gs;
            }
            comp.apply_floor(&floor);
        }
        for (j, row) in atom.labels_mut().iter_mut().enumerate() {
            let moved: Vec<f64> = row.iter().zip(&g.labels[c][j]).map(|(y, gy)| y - lr_a * gy).collect();
            *row = project_simplex(&moved);
        }
    }
    for (row, gl) in next.lambda_mut().iter_mut().zip(&g.lambda) {
        let moved: Vec<f64> = row.iter().zip(gl).map(|(x, gx)| x - lr_l * gx).collect();
        *row = project_simplex(&moved);
    }
    next
}

/// Outcome of one optimization step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub dictionary: Dictionary,
    /// Loss at the returned dictionary.
    pub loss: LossBreakdown,
    /// Loss before the step.
    pub previous: LossBreakdown,
    /// Number of step halvings performed.
    pub halvings: usize,
    /// False when every trial step increased the loss and the input was kept.
    pub accepted: bool,
    pub target_reconstruction: LabeledGmm,
}

/// One projected-gradient step with step halving on loss increase.
pub fn dadil_step(dict: &Dictionary, sources: &[LabeledGmm], target: &Gmm, cfg: &DadilConfig) -> Result<StepOutcome> {
    cfg.validate()?;
    let base = evaluate(dict, sources, target, cfg, true)?;
    let grad = base.grad.expect("requested");
    if !grad.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite gradient (loss = {:?}, gradient norm = {})",
            base.loss,
            grad.norm()
        )));
    }
    let current = base.loss.total();
    let mut scale = 1.0;
    for halvings in 0..=cfg.max_halvings {
        let candidate = descend(dict, &grad, cfg, scale);
        let ev = evaluate(&candidate, sources, target, cfg, false)?;
        if ev.loss.total() <= current {
            return Ok(StepOutcome {
                dictionary: candidate,
                loss: ev.loss,
                previous: base.loss,
                halvings,
                accepted: true,
                target_reconstruction: ev.target_reconstruction,
            });
        }
        scale *= 0.5;
    }
    Ok(StepOutcome {
        dictionary: dict.clone(),
        loss: base.loss.clone(),
        previous: base.loss,
        halvings: cfg.max_halvings,
        accepted: false,
        target_reconstruction: base.target_reconstruction,
    })
}

/// Per-dimension standard deviation of the equal-weight pool of source mixtures.
fn pooled_std(sources: &[LabeledGmm]) -> Vec<f64> {
    let d = sources[0].dim();
    let share = 1.0 / sources.len() as f64;
    let mut mean = vec![0.0; d];
    let mut second = vec![0.0; d];
    for s in sources {
        for (&w, c) in s.gmm().weights().iter().zip(s.gmm().components()) {
            for t in 0..d {
                let (m, sd) = (c.mu()[t], c.sigma()[t]);
                mean[t] += share * w * m;
                second[t] += share * w * (sd * sd + m * m);
            }
        }
    }
    mean.iter().zip(&second).map(|(m, s)| (s - m * m).max(0.0).sqrt()).collect()
}

/// Builds an initial dictionary of `n_atoms` atoms with `n_components`
/// uniform-weight components each. Every atom copies, with small mean jitter,
/// components of a single source mixture (sources dealt to atoms in a seeded
/// random order); when `n_components` covers the classes, component `k` is
/// drawn among that source's components of class `k mod n_c`.
pub fn init_dictionary(
    sources: &[LabeledGmm],
    target: &Gmm,
    n_atoms: usize,
    n_components: usize,
    seed: u64,
) -> Result<Dictionary> {
    let first = sources.first().ok_or(Error::Empty("source domains"))?;
    if n_atoms < 1 || n_components < 1 {
        return Err(Error::invalid("need at least one atom and one component"));
    }
    let (d, nc) = (first.dim(), first.n_classes());
    for s in sources {
        if s.dim() != d || s.n_classes() != nc {
            return Err(Error::invalid("source mixtures must share dimension and class count"));
        }
    }
    if target.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: target.dim() });
    }

    let std = pooled_std(sources);
    let unit: Vec<f64> = std.iter().map(|&s| if s > 0.0 { s } else { 1.0 }).collect();
    let floor: Vec<f64> = unit.iter().map(|s| VAR_FLOOR_REL * s).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..sources.len()).collect();
    let mut atoms = Vec::with_capacity(n_atoms);
    for a in 0..n_atoms {
        if a % sources.len() == 0 {
            order.shuffle(&mut rng);
        }
        let source = &sources[order[a % sources.len()]];
        let weights = source.gmm().weights();
        let mut comps = Vec::with_capacity(n_components);
        let mut labels = Vec::with_capacity(n_components);
        for k in 0..n_components {
            let wanted = (n_components >= nc).then_some(k % nc);
            let candidates: Vec<usize> = (0..source.k())
                .filter(|&i| wanted.is_none_or(|c| argmax(&source.labels()[i]) == c) && weights[i] > 0.0)
                .collect();
            let candidates = if candidates.is_empty() { (0..source.k()).collect() } else { candidates };
            let pick = WeightedIndex::new(candidates.iter().map(|&i| weights[i].max(f64::MIN_POSITIVE)))
                .map_err(|e| Error::invalid(format!("cannot sample source components: {e}")))?;
            let i = candidates[pick.sample(&mut rng)];
            let comp = &source.gmm().components()[i];
            let mu = comp
                .mu()
                .iter()
                .zip(&unit)
                .map(|(m, s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + 0.01 * s * z
                })
                .collect();
            let mut g = DiagGaussian::from_parts(mu, comp.sigma().to_vec());
            g.apply_floor(&floor);
            comps.push(g);
            labels.push(source.labels()[i].clone());
        }
        let w = vec![1.0 / n_components as f64; n_components];
        atoms.push(LabeledGmm::from_parts(Gmm::from_parts(w, comps), labels));
    }
    let lambda = vec![vec![1.0 / n_atoms as f64; n_atoms]; sources.len() + 1];
    Dictionary::new(atoms, lambda, floor)
}

/// Labeled reconstruction of the target domain, `B(lambda_T, atoms)`.
pub fn target_reconstruction(dict: &Dictionary, cfg: &DadilConfig) -> Result<LabeledGmm> {
    let domain = dict.n_sources();
    let bary = mixture_barycenter(dict.target_lambda(), &dict.atoms, &cfg.barycenter(dict.n_components(), domain), cfg.beta)?;
    Ok(bary.model)
}

/// MAP class of `x` under the target reconstruction.
pub fn target_classify(dict: &Dictionary, x: &[f64], cfg: &DadilConfig) -> Result<usize> {
    Ok(target_reconstruction(dict, cfg)?.map_classify(x))
}

/// Offline run: the full loss trajectory starts with the initial loss.
#[derive(Debug, Clone)]
pub struct OfflineFit {
    pub dictionary: Dictionary,
    pub losses: Vec<LossBreakdown>,
}

pub fn fit_offline(
    sources: &[LabeledGmm],
    target: &Gmm,
    init: Dictionary,
    cfg: &DadilConfig,
    n_iters: usize,
) -> Result<OfflineFit> {
    let mut dict = init;
    let mut losses = vec![dadil_loss(&dict, sources, target, cfg)?];
    for _ in 0..n_iters {
        let out = dadil_step(&dict, sources, target, cfg)?;
        dict = out.dictionary;
        losses.push(out.loss);
    }
    Ok(OfflineFit { dictionary: dict, losses })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Stream,
    Post,
}

/// One line of the dictionary-learning metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub phase: Phase,
    pub recon_mw2_sq: f64,
    pub total_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub wall_ms: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stream_end: bool,
}

/// Labeled held-out data used to track target accuracy during training.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: &'a [usize],
}

impl EvalSet<'_> {
    fn accuracy(&self, model: &LabeledGmm) -> f64 {
        accuracy(&model.classify_rows(self.x), self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineSchedule {
    pub stream: StreamConfig,
    /// Dictionary steps after every target batch.
    pub steps_per_batch: usize,
    pub post_stream_iters: usize,
    pub n_atoms: usize,
    pub n_components: usize,
    pub init_seed: u64,
}

#[derive(Debug, Clone)]
pub struct OnlineFit {
    pub dictionary: Dictionary,
    pub target: Gmm,
    pub log: Vec<MetricRecord>,
    /// Step index of the last dictionary update made while the stream was live.
    pub stream_end_step: usize,
}

/// Learns the dictionary while the target arrives in batches, then keeps
/// optimizing against the final target mixture.
pub fn fit_online<I>(
    sources: &[LabeledGmm],
    target_stream: I,
    schedule: &OnlineSchedule,
    cfg: &DadilConfig,
    eval: Option<EvalSet<'_>>,
) -> Result<OnlineFit>
where
    I: IntoIterator,
    I::Item: Batch,
{
    cfg.validate()?;
    let clock = Instant::now();
    let mut batches = target_stream.into_iter();
    let first = batches.next().ok_or(Error::Empty("target stream"))?;
    let mut state = StreamState::init(first.as_view(), schedule.stream)?;
    let mut dict = init_dictionary(sources, state.model(), schedule.n_atoms, schedule.n_components, schedule.init_seed)?;
    let mut log = Vec::new();
    let mut step = 0;

    let mut run_steps = |dict: &mut Dictionary, target: &Gmm, count: usize, phase: Phase, log: &mut Vec<MetricRecord>| -> Result<()> {
        for _ in 0..count {
            let out = dadil_step(dict, sources, target, cfg)?;
            *dict = out.dictionary;
            step += 1;
            log.push(MetricRecord {
                step,
                phase,
                recon_mw2_sq: out.loss.target,
                total_loss: out.loss.total(),
                accuracy: eval.map(|e| e.accuracy(&out.target_reconstruction)),
                wall_ms: clock.elapsed().as_secs_f64() * 1e3,
                stream_end: false,
            });
        }
        Ok(())
    };

    run_steps(&mut dict, &state.model().clone(), schedule.steps_per_batch, Phase::Stream, &mut log)?;
    for batch in batches {
        state.step(batch.as_view())?;
        run_steps(&mut dict, &state.model().clone(), schedule.steps_per_batch, Phase::Stream, &mut log)?;
    }
    let stream_end_step = log.len();
    if let Some(last) = log.last_mut() {
        last.stream_end = true;
    }
    let target = state.into_model();
    run_steps(&mut dict, &target, schedule.post_stream_iters, Phase::Post, &mut log)?;
    Ok(OnlineFit { dictionary: dict, target, log, stream_end_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simplex::one_hot;

    fn g(mu: &[f64], sigma: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mu.to_vec(), sigma.to_vec()).unwrap()
    }

    fn labeled(comps: Vec<DiagGaussian>, classes: &[usize], nc: usize) -> LabeledGmm {
        let k = comps.len();
        LabeledGmm::new(
            Gmm::new(vec![1.0 / k as f64; k], comps).unwrap(),
            classes.iter().map(|&c| one_hot(nc, c)).collect(),
        )
        .unwrap()
    }

    /// Two sources and a target, two classes, two components each.
    fn domains() -> (Vec<LabeledGmm>, LabeledGmm) {
        let s1 = labeled(vec![g(&[0.0, 0.0], &[1.0, 1.0]), g(&[6.0, 1.0], &[0.8, 1.2])], &[0, 1], 2);
        let s2 = labeled(vec![g(&[1.0, 3.0], &[1.1, 0.9]), g(&[7.0, 4.0], &[1.0, 1.0])], &[0, 1], 2);
        let t = labeled(vec![g(&[0.4, 1.4], &[1.0, 1.0]), g(&[6.5, 2.1], &[0.9, 1.1])], &[0, 1], 2);
        (vec![s1, s2], t)
    }

    fn exact_dictionary() -> (Dictionary, Vec<LabeledGmm>, Gmm) {
        let (sources, t) = domains();
        let atoms = vec![sources[0].clone(), sources[1].clone(), t.clone()];
        let lambda = vec![one_hot(3, 0), one_hot(3, 1), one_hot(3, 2)];
        let dict = Dictionary::new(atoms, lambda, vec![1e-6; 2]).unwrap();
        (dict, sources, t.gmm().clone())
    }

    #[test]
    fn exact_recovery_is_a_fixed_point() {
        let (dict, sources, target) = exact_dictionary();
        let cfg = DadilConfig::new(10.0);
        let loss = dadil_loss(&dict, &sources, &target, &cfg).unwrap();
        assert!(loss.total() < 1e-8, "{loss:?}");
        let (_, grad) = dadil_gradient(&dict, &sources, &target, &cfg).unwrap();
        assert!(grad.norm() < 1e-8);
        let out = dadil_step(&dict, &sources, &target, &cfg).unwrap();
        for (a, b) in out.dictionary.atoms().iter().zip(dict.atoms()) {
            assert!(mw2_sq(a.gmm(), b.gmm()).unwrap().0 < 1e-16);
        }
        assert_eq!(out.dictionary.lambda(), dict.lambda());
    }

    #[test]
    fn single_gaussian_loss_and_step() {
        let (mu_a, sd_a, mu_q, sd_q) = (3.0, 2.0, 1.0, 1.5);
        let atom = labeled(vec![g(&[mu_a], &[sd_a])], &[0], 1);
        let q = labeled(vec![g(&[mu_q], &[sd_q])], &[0], 1);
        let dict = Dictionary::new(vec![atom], vec![vec![1.0], vec![1.0]], vec![1e-6]).unwrap();
        let cfg = DadilConfig { lr_atoms: 0.05, ..DadilConfig::new(1.0) };
        let loss = dadil_loss(&dict, std::slice::from_ref(&q), q.gmm(), &cfg).unwrap();
        let expected = 2.0 * ((mu_a - mu_q).powi(2) + (sd_a - sd_q).powi(2));
        assert!((loss.total() - expected).abs() < 1e-12);

        let (_, grad) = dadil_gradient(&dict, std::slice::from_ref(&q), q.gmm(), &cfg).unwrap();
        assert!((grad.mu[0][0][0] - 4.0 * (mu_a - mu_q)).abs() < 1e-12);
        let out = dadil_step(&dict, std::slice::from_ref(&q), q.gmm(), &cfg).unwrap();
        assert_eq!(out.halvings, 0);
        let moved = out.dictionary.atoms()[0].gmm().components()[0].mu()[0];
        assert!((moved - (mu_a - 4.0 * 0.05 * (mu_a - mu_q))).abs() < 1e-12);
    }

    /// Central differences of the full loss along one coordinate.
    fn fd<F: FnMut(&mut Dictionary, f64)>(
        dict: &Dictionary,
        sources: &[LabeledGmm],
        target: &Gmm,
        cfg: &DadilConfig,
        h: f64,
        mut perturb: F,
    ) -> f64 {
        let mut plus = dict.clone();
        perturb(&mut plus, h);
        let mut minus = dict.clone();
        perturb(&mut minus, -h);
        let lp = dadil_loss(&plus, sources, target, cfg).unwrap().total();
        let lm = dadil_loss(&minus, sources, target, cfg).unwrap().total();
        (lp - lm) / (2.0 * h)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (sources, t) = domains();
        let atoms = vec![
            labeled(vec![g(&[0.2, 0.5], &[1.0, 0.9]), g(&[6.3, 1.8], &[0.7, 1.3])], &[0, 1], 2),
            labeled(vec![g(&[0.9, 2.6], &[1.2, 1.0]), g(&[7.2, 3.1], &[1.1, 0.8])], &[0, 1], 2),
        ];
        let lambda = vec![vec![0.7, 0.3], vec![0.35, 0.65], vec![0.55, 0.45]];
        let dict = Dictionary::new(atoms, lambda, vec![1e-6; 2]).unwrap();
        let cfg = DadilConfig::new(5.0);
        let (_, grad) = dadil_gradient(&dict, &sources, t.gmm(), &cfg).unwrap();
        let h = 1e-5;
        for c in 0..2 {
            for j in 0..2 {
                for d in 0..2 {
                    let num = fd(&dict, &sources, t.gmm(), &cfg, h, |x, e| {
                        x.atoms_mut()[c].gmm_mut().components_mut()[j].mu_mut()[d] += e
                    });
                    assert!((num - grad.mu[c][j][d]).abs() <= 1e-6 * (1.0 + num.abs()), "{num} {}", grad.mu[c][j][d]);
                    let num = fd(&dict, &sources, t.gmm(), &cfg, h, |x, e| {
                        x.atoms_mut()[c].gmm_mut().components_mut()[j].sigma_mut()[d] += e
                    });
                    assert!((num - grad.sigma[c][j][d]).abs() <= 1e-6 * (1.0 + num.abs()));
                }
            }
        }
        // coordinates: tangent direction e_0 - e_1 keeps each row on the simplex
        for l in 0..3 {
            let num = fd(&dict, &sources, t.gmm(), &cfg, h, |x, e| {
                x.lambda_mut()[l][0] += e;
                x.lambda_mut()[l][1] -= e;
            });
            let ana = grad.lambda[l][0] - grad.lambda[l][1];
            assert!((num - ana).abs() <= 1e-6 * (1.0 + num.abs()), "row {l}: {num} vs {ana}");
        }
    }

    #[test]
    fn init_is_deterministic_and_uniform() {
        let (sources, t) = domains();
        let a = init_dictionary(&sources, t.gmm(), 3, 4, 11).unwrap();
        assert_eq!(a, init_dictionary(&sources, t.gmm(), 3, 4, 11).unwrap());
        assert!(a.lambda().iter().all(|r| r.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15)));
        assert_eq!(a.lambda().len(), 3);
        for atom in a.atoms() {
            assert_eq!(atom.k(), 4);
            // class-balanced draws
            let classes: Vec<usize> = atom.labels().iter().map(|r| argmax(r)).collect();
            assert_eq!(classes, vec![0, 1, 0, 1]);
        }
        let one = init_dictionary(&sources, t.gmm(), 1, 2, 0).unwrap();
        assert!(one.lambda().iter().all(|r| r == &vec![1.0]));
        assert!(init_dictionary(&[], t.gmm(), 1, 2, 0).is_err());
    }

    #[test]
    fn offline_fit_decreases_loss_and_keeps_constraints() {
        let (sources, t) = domains();
        let init = init_dictionary(&sources, t.gmm(), 2, 2, 3).unwrap();
        let cfg = DadilConfig::new(5.0);
        let fit = fit_offline(&sources, t.gmm(), init.clone(), &cfg, 30).unwrap();
        for w in fit.losses.windows(2) {
            assert!(w[1].total() <= w[0].total() + 1e-6);
        }
        assert!(fit.losses.last().unwrap().total() < fit.losses[0].total());
        for row in fit.dictionary.lambda() {
            assert!(check_simplex(row, "row").is_ok());
        }
        for atom in fit.dictionary.atoms() {
            for c in atom.gmm().components() {
                assert!(c.sigma().iter().all(|&s| s >= 1e-6));
            }
        }
        let zero = fit_offline(&sources, t.gmm(), init.clone(), &cfg, 0).unwrap();
        assert_eq!(zero.dictionary, init);
    }

    #[test]
    fn single_component_reconstruction_classifies_constantly() {
        let atom = labeled(vec![g(&[0.0], &[1.0])], &[2], 3);
        let dict = Dictionary::new(vec![atom], vec![vec![1.0], vec![1.0]], vec![1e-6]).unwrap();
        let cfg = DadilConfig::new(1.0);
        for x in [-10.0, 0.0, 42.0] {
            assert_eq!(target_classify(&dict, &[x], &cfg).unwrap(), 2);
        }
    }

    #[test]
    fn classification_ignores_atom_order() {
        let (sources, t) = domains();
        let lambda = vec![vec![0.5, 0.5]; 3];
        let d1 = Dictionary::new(vec![sources[0].clone(), sources[1].clone()], lambda.clone(), vec![1e-6; 2]).unwrap();
        let d2 = Dictionary::new(vec![sources[1].clone(), sources[0].clone()], lambda, vec![1e-6; 2]).unwrap();
        let cfg = DadilConfig::new(10.0);
        let r1 = target_reconstruction(&d1, &cfg).unwrap();
        let r2 = target_reconstruction(&d2, &cfg).unwrap();
        for x in [[0.0, 0.0], [3.5, 2.0], [7.0, 3.0], [3.0, 1.0]] {
            assert_eq!(r1.map_classify(&x), r2.map_classify(&x));
        }
        let _ = t;
    }

    #[test]
    fn online_single_batch_matches_offline() {
        let (sources, t) = domains();
        let x = t.gmm().sample(64, 5);
        let schedule = OnlineSchedule {
            stream: StreamConfig::new(2, 4, 2, 1),
            steps_per_batch: 1,
            post_stream_iters: 5,
            n_atoms: 2,
            n_components: 2,
            init_seed: 7,
        };
        let cfg = DadilConfig::new(5.0);
        let online = fit_online(&sources, [x.view()], &schedule, &cfg, None).unwrap();
        assert_eq!(online.stream_end_step, 1);
        assert!(online.log[0].stream_end);
        assert_eq!(online.log.len(), 6);
        let q0 = StreamState::init(x.view(), schedule.stream).unwrap().into_model();
        let init = init_dictionary(&sources, &q0, 2, 2, 7).unwrap();
        let offline = fit_offline(&sources, &q0, init, &cfg, 6).unwrap();
        assert_eq!(online.dictionary, offline.dictionary);
        assert_eq!(online.target, q0);
    }

    #[test]
    fn step_rejects_invalid_config() {
        let (dict, sources, target) = exact_dictionary();
        let cfg = DadilConfig { lr_atoms: 0.0, ..DadilConfig::new(1.0) };
        assert!(dadil_step(&dict, &sources, &target, &cfg).is_err());
        assert!(dadil_loss(&dict, &sources[..1], &target, &DadilConfig::new(1.0)).is_err());
    }
}
