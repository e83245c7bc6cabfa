//! Online mixture fitting: each batch is summarized by a small BIC-selected
//! mixture, appended to the running model with sample-count weights, and the
//! result is compressed back to at most `k_max` components by repeatedly
//! merging the two components closest in W2.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::em::{get_best_gmm_with, EmConfig, BEST_GMM_RESTARTS, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::gaussian::{gauss_merge, w2_diag};
use crate::gmm::Gmm;

/// Hyperparameters of the streaming fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub delta_k: usize,
    pub seed: u64,
    /// Multiplier applied to the running sample count before each concat.
    /// `None` weights the whole history equally.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forgetting: Option<f64>,
    /// Relative log-likelihood tolerance of the per-batch EM fits.
    #[serde(default = "default_em_tol")]
    pub em_tol: f64,
}

fn default_em_tol() -> f64 {
    DEFAULT_TOL
}

impl StreamConfig {
    pub fn new(k_min: usize, k_max: usize, delta_k: usize, seed: u64) -> Self {
        Self { k_min, k_max, delta_k, seed, forgetting: None, em_tol: DEFAULT_TOL }
    }

    fn em(&self, seed: u64) -> EmConfig {
        EmConfig { tol: self.em_tol, n_init: BEST_GMM_RESTARTS, ..EmConfig::with_seed(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_min < 1 || self.k_min > self.k_max {
            return Err(Error::invalid(format!(
                "need 1 <= k_min <= k_max, got k_min={} k_max={}",
                self.k_min, self.k_max
            )));
        }
        if self.delta_k < 1 {
            return Err(Error::invalid("delta_k must be at least 1"));
        }
        if !(self.em_tol > 0.0 && self.em_tol.is_finite()) {
            return Err(Error::invalid(format!("EM tolerance must be positive, got {}", self.em_tol)));
        }
        if let Some(f) = self.forgetting {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid(format!("forgetting factor must lie in (0, 1], got {f}")));
            }
        }
        Ok(())
    }
}

/// Anything that can be viewed as an `n x d` batch.
pub trait Batch {
    fn as_view(&self) -> ArrayView2<'_, f64>;
}

impl Batch for Array2<f64> {
    fn as_view(&self) -> ArrayView2<'_, f64> {
        self.view()
    }
}

impl Batch for ArrayView2<'_, f64> {
    fn as_view(&self) -> ArrayView2<'_, f64> {
        self.view()
    }
}

impl<B: Batch + ?Sized> Batch for &B {
    fn as_view(&self) -> ArrayView2<'_, f64> {
        (**self).as_view()
    }
}

/// The running model of a stream; holds no samples.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    pub(crate) model: Gmm,
    pub(crate) n_seen: u64,
    /// Sample count backing the current weights; equals `n_seen` unless a
    /// forgetting factor is configured.
    pub(crate) n_effective: f64,
    pub(crate) step_index: u64,
    pub(crate) config: StreamConfig,
}

impl StreamState {
    /// Fits exactly `k_min` components to the first batch.
    pub fn init(first: ArrayView2<f64>, config: StreamConfig) -> Result<Self> {
        config.validate()?;
        if first.nrows() < config.k_min {
            return Err(Error::invalid(format!(
                "first batch has {} samples, fewer than k_min = {}",
                first.nrows(),
                config.k_min
            )));
        }
        let model = get_best_gmm_with(first, config.k_min, config.k_min, &config.em(config.seed))?;
        let n = first.nrows() as u64;
        Ok(Self { model, n_seen: n, n_effective: n as f64, step_index: 0, config })
    }

    /// Consumes one batch: fit, append, compress.
    pub fn step(&mut self, batch: ArrayView2<f64>) -> Result<()> {
        let n_batch = batch.nrows();
        if n_batch == 0 {
            return Err(Error::Empty("stream batch"));
        }
        if batch.ncols() != self.model.dim() {
            return Err(Error::DimensionMismatch { expected: self.model.dim(), got: batch.ncols() });
        }
        let step = self.step_index + 1;
        let seed = self.config.seed.wrapping_add(step);
        let fresh = get_best_gmm_with(batch, 1, self.config.delta_k.min(n_batch), &self.config.em(seed))?;
        let n_old = self.n_effective * self.config.forgetting.unwrap_or(1.0);
        let grown = concat_components(&self.model, n_old, &fresh, n_batch as f64)?;
        self.model = compress_gmm(&grown, self.config.k_max)?;
        self.n_seen += n_batch as u64;
        self.n_effective = n_old + n_batch as f64;
        self.step_index = step;
        Ok(())
    }

    pub fn model(&self) -> &Gmm {
        &self.model
    }

    pub fn into_model(self) -> Gmm {
        self.model
    }

    pub fn n_seen(&self) -> u64 {
        self.n_seen
    }

    pub fn n_effective(&self) -> f64 {
        self.n_effective
    }

    /// Number of batches consumed after the initial one.
    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }
}

/// Appends `new` to `old`, weighting each block by its share of samples.
pub fn concat_components(old: &Gmm, n_old: f64, new: &Gmm, n_batch: f64) -> Result<Gmm> {
    if old.dim() != new.dim() {
        return Err(Error::DimensionMismatch { expected: old.dim(), got: new.dim() });
    }
    if !(n_old >= 0.0 && n_batch >= 0.0 && n_old + n_batch > 0.0) {
        return Err(Error::invalid(format!("invalid sample counts ({n_old}, {n_batch})")));
    }
    let total = n_old + n_batch;
    let (a, b) = (n_old / total, n_batch / total);
    let mut weights: Vec<f64> = old.weights().iter().map(|w| w * a).collect();
    weights.extend(new.weights().iter().map(|w| w * b));
    let mut components = old.components().to_vec();
    components.extend_from_slice(new.components());
    Ok(Gmm::from_parts(weights, components))
}

/// Index pair `(i, j)`, `i < j`, with the smallest W2 distance; ties go to the
/// lexicographically smallest pair.
fn closest_pair(gmm: &Gmm) -> (usize, usize) {
    let comps = gmm.components();
    let mut best = (f64::INFINITY, 0, 1);
    for i in 0..comps.len() {
        for j in (i + 1)..comps.len() {
            let d = w2_diag(&comps[i], &comps[j]).expect("components share a dimension");
            if d < best.0 {
                best = (d, i, j);
            }
        }
    }
    (best.1, best.2)
}

/// Merges nearest pairs until at most `k_max` components remain. The merged
/// component replaces `i`, and `j` is removed.
pub fn compress_gmm(gmm: &Gmm, k_max: usize) -> Result<Gmm> {
    if k_max < 1 {
        return Err(Error::invalid("k_max must be at least 1"));
    }
    let (mut weights, mut comps) = gmm.clone().into_parts();
    while comps.len() > k_max {
        let current = Gmm::from_parts(weights.clone(), comps.clone());
        let (i, j) = closest_pair(&current);
        let (w, merged) = if weights[i] > 0.0 && weights[j] > 0.0 {
            gauss_merge((weights[i], weights[j]), (&comps[i], &comps[j]))?
        } else if weights[i] > 0.0 {
            (weights[i], comps[i].clone())
        } else {
            (weights[j], comps[j].clone())
        };
        weights[i] = w;
        comps[i] = merged;
        weights.remove(j);
        comps.remove(j);
    }
    Ok(Gmm::from_parts(weights, comps))
}

/// Runs the streaming fit over a sequence of batches.
pub fn online_gmm_fit<I>(stream: I, config: StreamConfig) -> Result<Gmm>
where
    I: IntoIterator,
    I::Item: Batch,
{
    let mut iter = stream.into_iter();
    let first = iter.next().ok_or(Error::Empty("stream"))?;
    let mut state = StreamState::init(first.as_view(), config)?;
    for batch in iter {
        state.step(batch.as_view())?;
    }
    Ok(state.into_model())
}
