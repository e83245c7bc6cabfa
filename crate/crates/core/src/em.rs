//! Maximum-likelihood fitting of diagonal mixtures by EM, BIC model
//! selection, and per-class fitting of labeled mixtures.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::{column_std, sigma_floor_from_std, DiagGaussian};
use crate::gmm::{Gmm, LabeledGmm};
use crate::simplex::{log_sum_exp, one_hot};

/// Relative log-likelihood change below which EM stops.
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_ITER: usize = 200;
/// Independent initializations per `k` tried by [`get_best_gmm`].
pub const BEST_GMM_RESTARTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Number of seedings; the run with the highest final likelihood wins.
    pub n_init: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER, n_init: 1, seed: 0 }
    }
}

impl EmConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

/// Outcome of one EM run.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub gmm: Gmm,
    /// Average log-likelihood evaluated at the start of every iteration, plus
    /// the value at the returned parameters.
    pub history: Vec<f64>,
    pub converged: bool,
    /// Number of components re-seeded after losing all responsibility mass.
    pub reseeds: usize,
}

/// Number of free parameters of a `k`-component diagonal mixture in `d` dimensions.
pub fn n_parameters(k: usize, d: usize) -> usize {
    (k - 1) + 2 * k * d
}

/// Bayesian information criterion, `p log n - 2 n L`, with `L` the average
/// log-likelihood.
pub fn bic(gmm: &Gmm, x: ArrayView2<f64>) -> Result<f64> {
    let ll = gmm.log_likelihood(x)?;
    let n = x.nrows() as f64;
    Ok(n_parameters(gmm.k(), gmm.dim()) as f64 * n.ln() - 2.0 * n * ll)
}

fn column_mean(x: ArrayView2<f64>) -> Vec<f64> {
    x.mean_axis(Axis(0)).expect("nonempty data").to_vec()
}

/// Fits a `k`-component diagonal mixture to the rows of `x`.
pub fn em_fit(x: ArrayView2<f64>, k: usize, cfg: &EmConfig) -> Result<EmFit> {
    let (n, d) = x.dim();
    if k == 0 {
        return Err(Error::invalid("component count must be at least 1"));
    }
    if d == 0 {
        return Err(Error::Empty("feature columns"));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} samples cannot support {k} components")));
    }
    if cfg.n_init == 0 {
        return Err(Error::invalid("n_init must be at least 1"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("EM input".into()));
    }

    let std = column_std(x);
    let floor = sigma_floor_from_std(&std);
    let sigma0: Vec<f64> = std.iter().zip(&floor).map(|(s, f)| s.max(*f)).collect();

    if k == 1 {
        let gmm = Gmm::single(DiagGaussian::from_parts(column_mean(x), sigma0));
        let ll = gmm.log_likelihood(x)?;
        return Ok(EmFit { gmm, history: vec![ll], converged: true, reseeds: 0 });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut best: Option<EmFit> = None;
    for _ in 0..cfg.n_init {
        let fit = em_run(x, &rows, k, cfg, &floor, &sigma0, &mut rng)?;
        let ll = *fit.history.last().expect("nonempty history");
        if best.as_ref().is_none_or(|b| ll > *b.history.last().expect("nonempty history")) {
            best = Some(fit);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

/// One EM run from a fresh seeding drawn from `rng`.
fn em_run(
    x: ArrayView2<f64>,
    rows: &[Vec<f64>],
    k: usize,
    cfg: &EmConfig,
    floor: &[f64],
    sigma0: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<EmFit> {
    let n = x.nrows();
    let means = kmeans_pp(x, k, rng);
    let mut components: Vec<DiagGaussian> =
        means.into_iter().map(|m| DiagGaussian::from_parts(m, sigma0.to_vec())).collect();
    let mut weights = vec![1.0 / k as f64; k];

    let mut resp = Array2::<f64>::zeros((n, k));
    let mut lse = vec![0.0; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut reseeds = 0;

    for _ in 0..cfg.max_iter {
        let gmm = Gmm::from_parts(weights.clone(), components.clone());
        let ll = e_step(&gmm, rows, &mut resp, &mut lse);
        if let Some(&prev) = history.last() {
            let prev: f64 = prev;
            if ll - prev <= cfg.tol * prev.abs() {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);
        reseeds += m_step(x, &resp, &lse, floor, sigma0, &mut weights, &mut components);
    }

    let gmm = Gmm::from_parts(weights, components);
    if !converged {
        history.push(gmm.log_likelihood(x)?);
    }
    Ok(EmFit { gmm, history, converged, reseeds })
}

/// Computes responsibilities into `resp`, the per-row log-normalizer into
/// `lse`, and returns the average log-likelihood.
fn e_step(gmm: &Gmm, rows: &[Vec<f64>], resp: &mut Array2<f64>, lse: &mut [f64]) -> f64 {
    let mut buf = vec![0.0; gmm.k()];
    let mut total = 0.0;
    for (i, row) in rows.iter().enumerate() {
        gmm.weighted_log_densities(row, &mut buf);
        let z = log_sum_exp(&buf);
        lse[i] = z;
        total += z;
        for (j, &v) in buf.iter().enumerate() {
            resp[[i, j]] = (v - z).exp();
        }
    }
    total / rows.len() as f64
}

fn m_step(
    x: ArrayView2<f64>,
    resp: &Array2<f64>,
    lse: &[f64],
    floor: &[f64],
    sigma0: &[f64],
    weights: &mut [f64],
    components: &mut [DiagGaussian],
) -> usize {
    let (n, d) = x.dim();
    let mut reseeds = 0;
    for (j, comp) in components.iter_mut().enumerate() {
        let col = resp.column(j);
        let nk: f64 = col.sum();
        if nk <= 1e-10 * n as f64 {
            // Lost all mass: restart at the worst-explained point.
            let worst = lse
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            *comp = DiagGaussian::from_parts(x.row(worst).to_vec(), sigma0.to_vec());
            weights[j] = 1.0 / n as f64;
            reseeds += 1;
            continue;
        }
        let mut mu = vec![0.0; d];
        for (r, row) in col.iter().zip(x.rows()) {
            for k in 0..d {
                mu[k] += r * row[k];
            }
        }
        mu.iter_mut().for_each(|m| *m /= nk);
        let mut var = vec![0.0; d];
        for (r, row) in col.iter().zip(x.rows()) {
            for k in 0..d {
                let dv = row[k] - mu[k];
                var[k] += r * dv * dv;
            }
        }
        let sigma = var.iter().zip(floor).map(|(v, f)| (v / nk).sqrt().max(*f)).collect();
        *comp = DiagGaussian::from_parts(mu, sigma);
        weights[j] = nk / n as f64;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    reseeds
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance to the nearest chosen center.
fn kmeans_pp(x: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = x.nrows();
    let sq = |a: ArrayView1<f64>, i: usize| -> f64 {
        a.iter().zip(x.row(i)).map(|(p, q)| (p - q) * (p - q)).sum()
    };
    // greedy variant: draw a few candidates per round and keep the one that
    // lowers the potential most
    let trials = 2 + (k as f64).ln().floor() as usize;
    let first = rng.random_range(0..n);
    let mut centers = vec![x.row(first).to_vec()];
    let mut dist: Vec<f64> = (0..n).map(|i| sq(x.row(first), i)).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let idx = if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut chosen = n - 1;
                for (i, &dv) in dist.iter().enumerate() {
                    if target < dv {
                        chosen = i;
                        break;
                    }
                    target -= dv;
                }
                chosen
            } else {
                rng.random_range(0..n)
            };
            let next: Vec<f64> = dist.iter().enumerate().map(|(i, &dv)| dv.min(sq(x.row(idx), i))).collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|(p, _, _)| potential < *p) {
                best = Some((potential, idx, next));
            }
        }
        let (_, idx, next) = best.expect("at least two trials");
        dist = next;
        centers.push(x.row(idx).to_vec());
    }
    centers
}

/// Fits EM for every `k` in `k1..=k2` (with `k2` clamped to the sample count)
/// and returns the fit with the lowest BIC; ties keep the smaller `k`. Each
/// `k` gets [`BEST_GMM_RESTARTS`] seedings.
pub fn get_best_gmm(x: ArrayView2<f64>, k1: usize, k2: usize, seed: u64) -> Result<Gmm> {
    get_best_gmm_with(x, k1, k2, &EmConfig { n_init: BEST_GMM_RESTARTS, ..EmConfig::with_seed(seed) })
}

/// [`get_best_gmm`] with explicit EM settings.
pub fn get_best_gmm_with(x: ArrayView2<f64>, k1: usize, k2: usize, cfg: &EmConfig) -> Result<Gmm> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    if k1 == 0 || k1 > k2 {
        return Err(Error::invalid(format!("invalid component range {k1}..={k2}")));
    }
    let k2 = k2.min(n);
    if k1 > k2 {
        return Err(Error::invalid(format!("{n} samples cannot support {k1} components")));
    }
    let mut best: Option<(f64, Gmm)> = None;
    for k in k1..=k2 {
        let fit = em_fit(x, k, cfg)?;
        let score = bic(&fit.gmm, x)?;
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, fit.gmm));
        }
    }
    Ok(best.expect("range is nonempty").1)
}

/// Fits one mixture per class (BIC over `1..=k_per_class`) and stacks them,
/// scaling each class block by its sample frequency and tagging its components
/// with the one-hot class label.
pub fn fit_labeled(
    x: ArrayView2<f64>,
    y: &[usize],
    n_classes: usize,
    k_per_class: usize,
    seed: u64,
) -> Result<LabeledGmm> {
    fit_labeled_with(x, y, n_classes, k_per_class, &EmConfig { n_init: BEST_GMM_RESTARTS, ..EmConfig::with_seed(seed) })
}

/// [`fit_labeled`] with explicit EM settings; class `c` uses seed `cfg.seed + c`.
pub fn fit_labeled_with(
    x: ArrayView2<f64>,
    y: &[usize],
    n_classes: usize,
    k_per_class: usize,
    cfg: &EmConfig,
) -> Result<LabeledGmm> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.nrows(), got: y.len() });
    }
    if n_classes == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {n_classes} classes")));
    }
    let n = y.len() as f64;
    let mut weights = Vec::new();
    let mut components = Vec::new();
    let mut labels = Vec::new();
    for c in 0..n_classes {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
        if idx.is_empty() {
            return Err(Error::EmptyClass(c));
        }
        let xc = x.select(Axis(0), &idx);
        let class_cfg = EmConfig { seed: cfg.seed.wrapping_add(c as u64), ..*cfg };
        let fit = get_best_gmm_with(xc.view(), 1, k_per_class, &class_cfg)?;
        let share = idx.len() as f64 / n;
        let (w, comps) = fit.into_parts();
        weights.extend(w.iter().map(|v| v * share));
        labels.extend(std::iter::repeat_n(one_hot(n_classes, c), comps.len()));
        components.extend(comps);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    LabeledGmm::new(Gmm::new(weights, components)?, labels)
}
