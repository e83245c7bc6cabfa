use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use ndarray::s;
use serde::{Deserialize, Serialize};
use serde_json::json;
use wgmm::datasets::as_stream;
use wgmm::em::{bic, em_fit, fit_labeled_with, get_best_gmm_with, EmConfig, BEST_GMM_RESTARTS, DEFAULT_MAX_ITER, DEFAULT_TOL};
use wgmm::io::{read_checkpoint, write_checkpoint, write_mixture, Mixture};
use wgmm::online::{StreamConfig, StreamState};
use wgmm::ot::mw2_sq;

use crate::config::{is_false, resolve};
use crate::output::{meta, out_dir, read_csv, say_json, write_manifest, JsonLines};
use crate::{CliError, CliResult};

#[derive(Debug, Args, Serialize)]
pub struct FitStreamArgs {
    /// Input CSV; a header column named `label` is ignored.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    /// The first line of the input is data, not a header.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    no_header: bool,
    /// Name of a label column to drop from the features.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kmin: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kmax: Option<usize>,
    /// Largest component count tried on each new batch.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dk: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Relative log-likelihood tolerance of the per-batch EM fits.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    em_tol: Option<f64>,
    /// Discount in (0, 1] applied to the running sample count at every step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    forgetting: Option<f64>,
    /// Also fit one EM with `kmax` components on the whole file.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    offline: bool,
    /// Continue from a checkpoint; its rows already seen are skipped.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    resume: Option<PathBuf>,
    /// Stop after this many batches following the initial one.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    stop_after: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitStreamConfig {
    input: Option<PathBuf>,
    no_header: bool,
    label: Option<String>,
    kmin: usize,
    kmax: usize,
    dk: usize,
    batch: usize,
    seed: u64,
    em_tol: f64,
    forgetting: Option<f64>,
    offline: bool,
    resume: Option<PathBuf>,
    stop_after: Option<usize>,
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct StepRecord {
    step: u64,
    #[serde(rename = "K")]
    k: usize,
    loglik_on_batch: f64,
    wall_ms: f64,
}

fn required(input: &Option<PathBuf>) -> CliResult<&PathBuf> {
    input.as_ref().ok_or_else(|| CliError::Usage("an input CSV is required (--input)".into()))
}

pub fn run_fit_stream(args: FitStreamArgs) -> CliResult<()> {
    let defaults = FitStreamConfig {
        input: None,
        no_header: false,
        label: None,
        kmin: 5,
        kmax: 15,
        dk: 3,
        batch: 32,
        seed: 0,
        em_tol: DEFAULT_TOL,
        forgetting: None,
        offline: false,
        resume: None,
        stop_after: None,
        out: None,
    };
    let cfg: FitStreamConfig = resolve(&defaults, args.config.as_deref(), &args)?;
    let input = required(&cfg.input)?;
    if cfg.batch == 0 {
        return Err(CliError::Usage("batch size must be at least 1".into()));
    }
    let ds = read_csv(input, !cfg.no_header, cfg.label.as_deref())?;
    let x = ds.x();
    let dir = out_dir(cfg.out.as_deref())?;

    let (mut state, start) = match &cfg.resume {
        Some(path) => {
            let (state, _) = read_checkpoint(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            if state.model().dim() != x.ncols() {
                return Err(CliError::Data(format!(
                    "checkpoint has dimension {}, input has {}",
                    state.model().dim(),
                    x.ncols()
                )));
            }
            let seen = usize::try_from(state.n_seen()).unwrap_or(usize::MAX).min(x.nrows());
            (state, seen)
        }
        None => {
            let mut stream_cfg = StreamConfig::new(cfg.kmin, cfg.kmax, cfg.dk, cfg.seed);
            stream_cfg.em_tol = cfg.em_tol;
            stream_cfg.forgetting = cfg.forgetting;
            let first = x.slice(s![..cfg.batch.min(x.nrows()), ..]);
            let t = Instant::now();
            let state = StreamState::init(first, stream_cfg)?;
            let record = StepRecord {
                step: 0,
                k: state.model().k(),
                loglik_on_batch: state.model().log_likelihood(first)?,
                wall_ms: t.elapsed().as_secs_f64() * 1e3,
            };
            let mut log = JsonLines::open(&dir.join("metrics.jsonl"), false)?;
            log.write(&record)?;
            log.finish()?;
            (state, first.nrows())
        }
    };
    let mut log = JsonLines::open(&dir.join("metrics.jsonl"), true)?;
    let rest = x.slice(s![start.., ..]);
    let limit = cfg.stop_after.unwrap_or(usize::MAX);
    if rest.nrows() > 0 {
        for batch in as_stream(rest, cfg.batch)?.take(limit) {
            let t = Instant::now();
            state.step(batch)?;
            let ll = state.model().log_likelihood(batch)?;
            log.write(&StepRecord {
                step: state.step_index(),
                k: state.model().k(),
                loglik_on_batch: ll,
                wall_ms: t.elapsed().as_secs_f64() * 1e3,
            })?;
        }
    }
    log.finish()?;

    let seed = state.config().seed;
    let model = Mixture::Plain(state.model().clone());
    write_mixture(&dir.join("model.json"), &model, &meta(seed))?;
    write_checkpoint(&dir.join("checkpoint.json"), &state, &meta(seed))?;
    let mut outputs = vec!["model.json".to_string(), "checkpoint.json".into(), "metrics.jsonl".into()];
    let mut summary = json!({
        "steps": state.step_index(),
        "K": state.model().k(),
        "n_seen": state.n_seen(),
        "loglik_on_input": state.model().log_likelihood(x)?,
    });
    if cfg.offline {
        let k = state.config().k_max.min(x.nrows());
        let em = EmConfig { tol: state.config().em_tol, n_init: BEST_GMM_RESTARTS, ..EmConfig::with_seed(seed) };
        let offline = em_fit(x, k, &em)?.gmm;
        write_mixture(&dir.join("offline.json"), &Mixture::Plain(offline.clone()), &meta(seed))?;
        outputs.push("offline.json".into());
        summary["mw2_sq_to_offline"] = json!(mw2_sq(state.model(), &offline)?.0);
        summary["offline_loglik_on_input"] = json!(offline.log_likelihood(x)?);
    }
    write_manifest(&dir, "fit-stream", &cfg, &outputs, summary.clone())?;
    say_json(&summary);
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct FitOfflineArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    no_header: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    /// Fixed component count; overrides the BIC search range.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kmin: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kmax: Option<usize>,
    /// Fit one mixture per class from the label column and store class
    /// distributions; `kmax` bounds the components per class.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    labeled: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_init: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    em_tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_iter: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitOfflineConfig {
    input: Option<PathBuf>,
    no_header: bool,
    label: Option<String>,
    k: Option<usize>,
    kmin: usize,
    kmax: usize,
    labeled: bool,
    seed: u64,
    n_init: usize,
    em_tol: f64,
    max_iter: usize,
    out: Option<PathBuf>,
}

pub fn run_fit_offline(args: FitOfflineArgs) -> CliResult<()> {
    let defaults = FitOfflineConfig {
        input: None,
        no_header: false,
        label: None,
        k: None,
        kmin: 1,
        kmax: 15,
        labeled: false,
        seed: 0,
        n_init: BEST_GMM_RESTARTS,
        em_tol: DEFAULT_TOL,
        max_iter: DEFAULT_MAX_ITER,
        out: None,
    };
    let cfg: FitOfflineConfig = resolve(&defaults, args.config.as_deref(), &args)?;
    let input = required(&cfg.input)?;
    let ds = read_csv(input, !cfg.no_header, cfg.label.as_deref())?;
    let (kmin, kmax) = cfg.k.map_or((cfg.kmin, cfg.kmax), |k| (k, k));
    let em = EmConfig { tol: cfg.em_tol, max_iter: cfg.max_iter, n_init: cfg.n_init, seed: cfg.seed };
    let model = if cfg.labeled {
        let y = ds.labels()?;
        Mixture::Labeled(fit_labeled_with(ds.x(), y, ds.n_classes(), kmax, &em)?)
    } else {
        Mixture::Plain(get_best_gmm_with(ds.x(), kmin, kmax, &em)?)
    };
    let dir = out_dir(cfg.out.as_deref())?;
    write_mixture(&dir.join("model.json"), &model, &meta(cfg.seed))?;
    let g = model.gmm();
    let summary = json!({
        "K": g.k(),
        "bic": bic(g, ds.x())?,
        "loglik_on_input": g.log_likelihood(ds.x())?,
    });
    write_manifest(&dir, "fit-offline", &cfg, &["model.json".into()], summary.clone())?;
    say_json(&summary);
    Ok(())
}
