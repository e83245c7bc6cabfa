use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::{json, Value};
use wgmm::em::bic;
use wgmm::gmm::{accuracy, Gmm};
use wgmm::io::{checkpoint_from_str, dictionary_from_str, mixture_from_str, read_mixture, Mixture};
use wgmm::ot::mw2_sq;

use crate::output::{read_csv, say_json};
use crate::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Mixture file to evaluate.
    #[arg(long)]
    model: PathBuf,
    /// CSV to score the model on (BIC, mean log-likelihood, and accuracy
    /// when both the model and the file carry labels).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    no_header: bool,
    /// Second mixture file; reports the squared mixture-Wasserstein distance.
    #[arg(long)]
    against: Option<PathBuf>,
}

fn load(path: &Path) -> CliResult<Mixture> {
    read_mixture(path).map(|(m, _)| m).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn gmm_summary(g: &Gmm) -> Value {
    json!({ "K": g.k(), "d": g.dim(), "weights": g.weights() })
}

pub fn run_eval(args: EvalArgs) -> CliResult<()> {
    let model = load(&args.model)?;
    let g = model.gmm();
    let mut out = gmm_summary(g);
    if let Some(path) = &args.data {
        let ds = read_csv(path, !args.no_header, args.label.as_deref())?;
        if ds.dim() != g.dim() {
            return Err(CliError::Data(format!("model has dimension {}, data has {}", g.dim(), ds.dim())));
        }
        out["n"] = json!(ds.n());
        out["bic"] = json!(bic(g, ds.x())?);
        out["loglik_mean"] = json!(g.log_likelihood(ds.x())?);
        if let (Some(l), Some(y)) = (model.labeled(), ds.y()) {
            out["accuracy"] = json!(accuracy(&l.classify_rows(ds.x()), y));
        }
    }
    if let Some(path) = &args.against {
        let other = load(path)?;
        out["mw2_sq"] = json!(mw2_sq(g, other.gmm())?.0);
    }
    say_json(&out);
    Ok(())
}

pub fn run_inspect(path: &Path) -> CliResult<()> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let located = |e: wgmm::Error| CliError::Data(format!("{}: {e}", path.display()));
    let probe: Value = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let out = if probe.get("atoms").is_some() {
        let f = dictionary_from_str(&text).map_err(located)?;
        let d = &f.dictionary;
        json!({
            "kind": "dictionary",
            "C": d.n_atoms(),
            "K": d.n_components(),
            "d": d.dim(),
            "n_c": d.n_classes(),
            "beta": f.beta,
            "Lambda": d.lambda(),
            "meta": f.meta,
        })
    } else if probe.get("n_seen").is_some() {
        let (s, meta) = checkpoint_from_str(&text).map_err(located)?;
        let mut out = gmm_summary(s.model());
        out["kind"] = json!("checkpoint");
        out["n_seen"] = json!(s.n_seen());
        out["step_index"] = json!(s.step_index());
        out["config"] = json!(s.config());
        out["meta"] = json!(meta);
        out
    } else {
        let (m, meta) = mixture_from_str(&text).map_err(located)?;
        let mut out = gmm_summary(m.gmm());
        out["kind"] = json!("mixture");
        if let Some(l) = m.labeled() {
            out["n_classes"] = json!(l.n_classes());
        }
        out["meta"] = json!(meta);
        out
    };
    say_json(&out);
    Ok(())
}
