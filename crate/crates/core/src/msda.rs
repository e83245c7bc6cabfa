//! Multi-source adaptation experiment: per fold of the target, learn a
//! dictionary while the target training split streams in, then classify the
//! held-out split with the target reconstruction. Optional references are
//! the same dictionary learned offline on a fully fitted target mixture, a
//! source-only classifier, and a classifier trained on labeled target data.

use ndarray::{concatenate, Axis};
use serde::{Deserialize, Serialize};

use crate::dadil::{fit_offline, Dictionary, fit_online, init_dictionary, target_reconstruction, DadilConfig, EvalSet, MetricRecord, OnlineSchedule};
use crate::datasets::{as_stream, kfold_split, LabeledDataset};
use crate::em::{fit_labeled_with, get_best_gmm_with, EmConfig, BEST_GMM_RESTARTS};
use crate::error::{Error, Result};
use crate::gmm::{accuracy, LabeledGmm};
use crate::online::StreamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsdaConfig {
    pub folds: usize,
    pub batch_size: usize,
    /// Upper bound of the per-class BIC search when fitting labeled mixtures.
    pub k_per_class: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub delta_k: usize,
    pub n_atoms: usize,
    pub n_components: usize,
    pub steps_per_batch: usize,
    pub post_stream_iters: usize,
    /// Samples replayed from each source mixture for the source-only classifier.
    pub replay_per_source: usize,
    /// Relative log-likelihood tolerance of every EM fit in the experiment.
    pub em_tol: f64,
    pub dadil: DadilConfig,
    pub seed: u64,
}

impl MsdaConfig {
    /// Defaults sized for `n_classes` well-separated classes.
    pub fn new(n_classes: usize, n_sources: usize, beta: f64) -> Self {
        Self {
            folds: 5,
            batch_size: 100,
            k_per_class: 1,
            k_min: n_classes,
            k_max: n_classes,
            delta_k: n_classes,
            n_atoms: n_sources,
            n_components: n_classes,
            steps_per_batch: 1,
            post_stream_iters: 100,
            replay_per_source: 1000,
            em_tol: 1e-8,
            dadil: DadilConfig::new(beta),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::invalid("need at least 2 folds"));
        }
        if !(self.em_tol > 0.0 && self.em_tol.is_finite()) {
            return Err(Error::invalid("EM tolerance must be positive"));
        }
        if self.batch_size < 1 || self.k_per_class < 1 || self.n_atoms < 1 || self.n_components < 1 {
            return Err(Error::invalid("batch size, k_per_class, n_atoms and n_components must be positive"));
        }
        self.stream(0).validate()?;
        self.dadil.validate()
    }

    fn stream(&self, seed: u64) -> StreamConfig {
        StreamConfig { em_tol: self.em_tol, ..StreamConfig::new(self.k_min, self.k_max, self.delta_k, seed) }
    }

    fn em(&self, seed: u64) -> EmConfig {
        EmConfig { tol: self.em_tol, n_init: BEST_GMM_RESTARTS, ..EmConfig::with_seed(seed) }
    }
}

/// Which reference methods to run next to the online learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct References {
    pub offline: bool,
    pub baseline: bool,
    pub oracle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub online_accuracy: f64,
    /// Target reconstruction loss at the end of the online run.
    pub online_recon: f64,
    /// Full dictionary loss at the end of the online run.
    pub online_loss: f64,
    pub stream_end_step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offline_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offline_recon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offline_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_accuracy: Option<f64>,
    #[serde(skip)]
    pub log: Vec<MetricRecord>,
    /// Dictionary at the end of the online run.
    #[serde(skip)]
    pub dictionary: Option<Dictionary>,
}

/// Mean and spread of one score over folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n - 1).
    pub std: f64,
    pub lower_2sigma: f64,
    pub upper_2sigma: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let std = var.sqrt();
        Some(Self { mean, std, lower_2sigma: mean - 2.0 * std, upper_2sigma: mean + 2.0 * std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsdaReport {
    pub folds: Vec<FoldReport>,
    pub online_accuracy: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offline_accuracy: Option<Summary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_accuracy: Option<Summary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_accuracy: Option<Summary>,
}

/// Labeled mixtures of every source, fitted once up front.
pub fn fit_sources(sources: &[LabeledDataset], n_classes: usize, cfg: &MsdaConfig) -> Result<Vec<LabeledGmm>> {
    if sources.is_empty() {
        return Err(Error::Empty("source domains"));
    }
    sources
        .iter()
        .enumerate()
        .map(|(s, ds)| {
            let y = ds.labels()?;
            fit_labeled_with(ds.x(), y, n_classes, cfg.k_per_class, &cfg.em(cfg.seed.wrapping_add(1000 * s as u64)))
        })
        .collect()
}

/// Source-only classifier: replay samples from every source mixture, pool
/// them, and fit one labeled mixture.
pub fn source_only_classifier(source_models: &[LabeledGmm], cfg: &MsdaConfig, seed: u64) -> Result<LabeledGmm> {
    let n_classes = source_models[0].n_classes();
    let mut xs = Vec::with_capacity(source_models.len());
    let mut ys = Vec::new();
    for (s, m) in source_models.iter().enumerate() {
        let (x, y) = m.sample(cfg.replay_per_source, seed.wrapping_add(s as u64));
        xs.push(x);
        ys.extend(y);
    }
    let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
    let pooled = concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
    fit_labeled_with(pooled.view(), &ys, n_classes, cfg.k_per_class * source_models.len(), &cfg.em(seed))
}

/// Runs one fold. `fold_seed` drives every random choice of the fold.
pub fn run_fold(
    source_models: &[LabeledGmm],
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &MsdaConfig,
    refs: References,
    fold: usize,
    fold_seed: u64,
) -> Result<FoldReport> {
    let test_y = test.labels()?;
    let n_classes = source_models[0].n_classes();
    let dadil = DadilConfig { seed: fold_seed, ..cfg.dadil };
    let schedule = OnlineSchedule {
        stream: cfg.stream(fold_seed),
        steps_per_batch: cfg.steps_per_batch,
        post_stream_iters: cfg.post_stream_iters,
        n_atoms: cfg.n_atoms,
        n_components: cfg.n_components,
        init_seed: fold_seed,
    };
    let eval = EvalSet { x: test.x(), y: test_y };
    let online = fit_online(source_models, as_stream(train.x(), cfg.batch_size)?, &schedule, &dadil, Some(eval))?;
    let online_model = target_reconstruction(&online.dictionary, &dadil)?;
    let online_accuracy = accuracy(&online_model.classify_rows(test.x()), test_y);
    let online_recon = online.log.last().map_or(f64::NAN, |r| r.recon_mw2_sq);
    let online_loss = online.log.last().map_or(f64::NAN, |r| r.total_loss);

    let mut report = FoldReport {
        fold,
        online_accuracy,
        online_recon,
        online_loss,
        stream_end_step: online.stream_end_step,
        offline_accuracy: None,
        offline_recon: None,
        offline_loss: None,
        baseline_accuracy: None,
        oracle_accuracy: None,
        log: online.log,
        dictionary: Some(online.dictionary),
    };

    if refs.offline {
        // same initialization and the same total number of updates as the online run
        let target = get_best_gmm_with(train.x(), cfg.k_min, cfg.k_max, &cfg.em(fold_seed))?;
        let init = init_dictionary(source_models, &target, cfg.n_atoms, cfg.n_components, fold_seed)?;
        let iters = report.log.len();
        let fit = fit_offline(source_models, &target, init, &dadil, iters)?;
        let model = target_reconstruction(&fit.dictionary, &dadil)?;
        report.offline_accuracy = Some(accuracy(&model.classify_rows(test.x()), test_y));
        report.offline_recon = fit.losses.last().map(|l| l.target);
        report.offline_loss = fit.losses.last().map(|l| l.total());
    }
    if refs.baseline {
        let model = source_only_classifier(source_models, cfg, fold_seed)?;
        report.baseline_accuracy = Some(accuracy(&model.classify_rows(test.x()), test_y));
    }
    if refs.oracle {
        let model = fit_labeled_with(train.x(), train.labels()?, n_classes, cfg.k_per_class, &cfg.em(fold_seed))?;
        report.oracle_accuracy = Some(accuracy(&model.classify_rows(test.x()), test_y));
    }
    Ok(report)
}

/// Full k-fold experiment. Fold `f` uses seed `cfg.seed + f`.
pub fn run_msda(sources: &[LabeledDataset], target: &LabeledDataset, cfg: &MsdaConfig, refs: References) -> Result<MsdaReport> {
    cfg.validate()?;
    let n_classes = sources
        .iter()
        .map(|s| s.labels().map(|_| s.n_classes()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .max()
        .unwrap_or(0);
    if target.y().is_none() {
        return Err(Error::Data("target labels are needed to score held-out folds".into()));
    }
    if let Some(bad) = sources.iter().find(|s| s.dim() != target.dim()) {
        return Err(Error::DimensionMismatch { expected: target.dim(), got: bad.dim() });
    }
    let source_models = fit_sources(sources, n_classes, cfg)?;
    let folds = kfold_split(target.n(), target.y(), cfg.folds, cfg.seed)?;
    let mut reports = Vec::with_capacity(folds.len());
    for (f, fold) in folds.iter().enumerate() {
        let train = target.select(&fold.train);
        let test = target.select(&fold.test);
        reports.push(run_fold(&source_models, &train, &test, cfg, refs, f, cfg.seed.wrapping_add(f as u64))?);
    }
    let collect = |get: fn(&FoldReport) -> Option<f64>| -> Option<Summary> {
        let v: Option<Vec<f64>> = reports.iter().map(get).collect();
        v.and_then(|v| Summary::of(&v))
    };
    Ok(MsdaReport {
        online_accuracy: collect(|r| Some(r.online_accuracy)).expect("at least two folds"),
        offline_accuracy: collect(|r| r.offline_accuracy),
        baseline_accuracy: collect(|r| r.baseline_accuracy),
        oracle_accuracy: collect(|r| r.oracle_accuracy),
        folds: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_msda_synthetic, MsdaSpec};

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0]).unwrap();
        assert!((s.mean - 2.0).abs() < 1e-15);
        assert!((s.std - 1.0).abs() < 1e-15);
        assert!((s.upper_2sigma - 4.0).abs() < 1e-15);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn small_run_produces_reports() {
        let spec = MsdaSpec { n_sources: 2, n_classes: 2, dim: 2, shift_scale: 1.0, class_spread: 4.0, target_offset: 0.0, n_per_domain: 200, seed: 3 };
        let data = gen_msda_synthetic(&spec).unwrap();
        let mut cfg = MsdaConfig::new(2, 2, 10.0);
        cfg.folds = 2;
        cfg.post_stream_iters = 3;
        cfg.batch_size = 50;
        let refs = References { offline: true, baseline: true, oracle: true };
        let report = run_msda(&data.sources, &data.target, &cfg, refs).unwrap();
        assert_eq!(report.folds.len(), 2);
        for f in &report.folds {
            assert_eq!(f.stream_end_step, 2);
            assert_eq!(f.log.len(), 5);
            assert!(f.offline_recon.is_some() && f.baseline_accuracy.is_some() && f.oracle_accuracy.is_some());
        }
        assert!(report.oracle_accuracy.unwrap().mean > 0.9);
        let again = run_msda(&data.sources, &data.target, &cfg, refs).unwrap();
        assert_eq!(serde_json::to_string(&report).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn unlabeled_sources_are_rejected() {
        let spec = MsdaSpec { n_sources: 1, n_classes: 2, dim: 2, shift_scale: 1.0, class_spread: 4.0, target_offset: 0.0, n_per_domain: 100, seed: 3 };
        let data = gen_msda_synthetic(&spec).unwrap();
        let (x, _) = data.sources[0].clone().into_parts();
        let unlabeled = LabeledDataset::new(x, None, "s").unwrap();
        let err = run_msda(&[unlabeled], &data.target, &MsdaConfig::new(2, 1, 1.0), References::default());
        assert!(matches!(err, Err(Error::Data(_))));
    }
}
