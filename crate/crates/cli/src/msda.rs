use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use wgmm::io::{write_dictionary, Meta};
use wgmm::msda::{run_msda, MsdaConfig, References, Summary};

use crate::config::{is_false, resolve};
use crate::output::{now, out_dir, read_csv, say, write_manifest, JsonLines};
use crate::{CliError, CliResult};

#[derive(Debug, Args, Serialize)]
pub struct MsdaArgs {
    /// Labeled source CSV; repeat once per source domain.
    #[arg(long = "source")]
    #[serde(rename = "sources", skip_serializing_if = "Vec::is_empty")]
    sources: Vec<PathBuf>,
    /// Target CSV. Its labels are used only to score held-out folds.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<PathBuf>,
    /// Name of the label column in every file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    no_header: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    folds: Option<usize>,
    /// Target samples per stream batch.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<usize>,
    /// Weight of the label term in the supervised transport cost (required).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    /// Number of atoms; defaults to the number of sources.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_atoms: Option<usize>,
    /// Components per atom; defaults to the number of classes.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_components: Option<usize>,
    /// Stream mixture bounds; each defaults to the number of classes.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kmin: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kmax: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dk: Option<usize>,
    /// Upper bound of the per-class component search for labeled fits.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    k_per_class: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    steps_per_batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    post_stream_iters: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr_atoms: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr_lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    em_tol: Option<f64>,
    /// Samples drawn from each source mixture for the source-only baseline.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    replay_per_source: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Also learn the dictionary offline on a fully fitted target mixture.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    offline: bool,
    /// Also score the source-only classifier.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    baseline: bool,
    /// Also score a classifier trained on the labeled target training split.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    oracle: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MsdaRunConfig {
    sources: Vec<PathBuf>,
    target: Option<PathBuf>,
    label: String,
    no_header: bool,
    folds: usize,
    batch: usize,
    beta: Option<f64>,
    n_atoms: Option<usize>,
    n_components: Option<usize>,
    kmin: Option<usize>,
    kmax: Option<usize>,
    dk: Option<usize>,
    k_per_class: usize,
    steps_per_batch: usize,
    post_stream_iters: usize,
    lr_atoms: f64,
    lr_lambda: f64,
    em_tol: f64,
    replay_per_source: usize,
    seed: u64,
    offline: bool,
    baseline: bool,
    oracle: bool,
    out: Option<PathBuf>,
}

fn describe(name: &str, s: &Summary) -> String {
    format!("{name}: {:.4} +/- {:.4} (2 sigma)", s.mean, 2.0 * s.std)
}

pub fn run(args: MsdaArgs) -> CliResult<()> {
    let base = MsdaConfig::new(1, 1, 0.0);
    let defaults = MsdaRunConfig {
        sources: Vec::new(),
        target: None,
        label: "label".into(),
        no_header: false,
        folds: base.folds,
        batch: base.batch_size,
        beta: None,
        n_atoms: None,
        n_components: None,
        kmin: None,
        kmax: None,
        dk: None,
        k_per_class: base.k_per_class,
        steps_per_batch: base.steps_per_batch,
        post_stream_iters: base.post_stream_iters,
        lr_atoms: base.dadil.lr_atoms,
        lr_lambda: base.dadil.lr_lambda,
        em_tol: base.em_tol,
        replay_per_source: base.replay_per_source,
        seed: base.seed,
        offline: false,
        baseline: false,
        oracle: false,
        out: None,
    };
    let cfg: MsdaRunConfig = resolve(&defaults, args.config.as_deref(), &args)?;
    if cfg.sources.is_empty() {
        return Err(CliError::Usage("at least one --source file is required".into()));
    }
    let target_path = cfg.target.as_ref().ok_or_else(|| CliError::Usage("--target is required".into()))?;
    let beta = cfg.beta.ok_or_else(|| CliError::Usage("--beta is required".into()))?;

    let header = !cfg.no_header;
    let sources = cfg
        .sources
        .iter()
        .map(|p| {
            let ds = read_csv(p, header, Some(&cfg.label))?;
            if ds.y().is_none() {
                return Err(CliError::Data(format!("{}: source files must be labeled", p.display())));
            }
            Ok(ds)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let target = read_csv(target_path, header, Some(&cfg.label))?;
    let n_classes = sources.iter().map(|s| s.n_classes()).max().unwrap_or(1);

    let mut mc = MsdaConfig::new(n_classes, sources.len(), beta);
    mc.folds = cfg.folds;
    mc.batch_size = cfg.batch;
    mc.k_per_class = cfg.k_per_class;
    mc.k_min = cfg.kmin.unwrap_or(n_classes);
    mc.k_max = cfg.kmax.unwrap_or(mc.k_min.max(n_classes));
    mc.delta_k = cfg.dk.unwrap_or(n_classes);
    mc.n_atoms = cfg.n_atoms.unwrap_or(sources.len());
    mc.n_components = cfg.n_components.unwrap_or(n_classes);
    mc.steps_per_batch = cfg.steps_per_batch;
    mc.post_stream_iters = cfg.post_stream_iters;
    mc.replay_per_source = cfg.replay_per_source;
    mc.em_tol = cfg.em_tol;
    mc.dadil.lr_atoms = cfg.lr_atoms;
    mc.dadil.lr_lambda = cfg.lr_lambda;
    mc.seed = cfg.seed;

    let refs = References { offline: cfg.offline, baseline: cfg.baseline, oracle: cfg.oracle };
    let report = run_msda(&sources, &target, &mc, refs)?;

    let dir = out_dir(cfg.out.as_deref())?;
    let mut outputs = vec!["report.json".to_string(), "metrics.jsonl".into()];
    let mut log = JsonLines::open(&dir.join("metrics.jsonl"), false)?;
    for fold in &report.folds {
        for record in &fold.log {
            let mut line = serde_json::to_value(record).map_err(|e| CliError::Data(e.to_string()))?;
            if let Value::Object(map) = &mut line {
                map.insert("fold".into(), json!(fold.fold));
            }
            log.write(&line)?;
        }
        if let Some(dict) = &fold.dictionary {
            let name = format!("dictionary_fold{}.json", fold.fold);
            let meta = Meta {
                seed: Some(mc.seed.wrapping_add(fold.fold as u64)),
                created: Some(now()),
                iters: Some(fold.log.len().saturating_sub(1)),
            };
            write_dictionary(&dir.join(&name), dict, beta, &meta)?;
            outputs.push(name);
        }
    }
    log.finish()?;
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    std::fs::write(dir.join("report.json"), text)?;

    let resolved = json!({ "run": cfg, "experiment": mc });
    let summary = json!({
        "online_accuracy": report.online_accuracy,
        "offline_accuracy": report.offline_accuracy,
        "baseline_accuracy": report.baseline_accuracy,
        "oracle_accuracy": report.oracle_accuracy,
    });
    write_manifest(&dir, "msda", &resolved, &outputs, summary)?;

    say(&describe("online", &report.online_accuracy));
    for (name, s) in [("offline", report.offline_accuracy), ("baseline", report.baseline_accuracy), ("oracle", report.oracle_accuracy)] {
        if let Some(s) = s {
            say(&describe(name, &s));
        }
    }
    say(&format!("results in {}", dir.display()));
    Ok(())
}
