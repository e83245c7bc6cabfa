use std::path::PathBuf;

use clap::{Args, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use wgmm::datasets::{gen_msda_synthetic, gen_toy_clusters, save_csv, MsdaSpec, Order};

use crate::config::resolve;
use crate::output::{out_dir, say, write_manifest};
use crate::CliResult;

#[derive(Debug, Subcommand)]
pub enum GenCommand {
    /// Three interleaved arcs, 600 points in 2-d.
    Toy(ToyArgs),
    /// Labeled source domains and a shifted target domain.
    Msda(GenMsdaArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ToyOrder {
    Sequential,
    Shuffled,
}

#[derive(Debug, Args, Serialize)]
pub struct ToyArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Emit the arcs one after another or interleaved.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    order: Option<ToyOrder>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToyConfig {
    seed: u64,
    order: ToyOrder,
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenMsdaArgs {
    /// Number of source domains.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    domains: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    shift_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    class_spread: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    target_offset: Option<f64>,
    /// Samples per domain; must be a multiple of the class count.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_per_domain: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenMsdaConfig {
    domains: usize,
    classes: usize,
    dim: usize,
    shift_scale: f64,
    class_spread: f64,
    target_offset: f64,
    n_per_domain: usize,
    seed: u64,
    out: Option<PathBuf>,
}

pub fn run(cmd: GenCommand) -> CliResult<()> {
    match cmd {
        GenCommand::Toy(args) => {
            let defaults = ToyConfig { seed: 0, order: ToyOrder::Sequential, out: None };
            let cfg: ToyConfig = resolve(&defaults, args.config.as_deref(), &args)?;
            let dir = out_dir(cfg.out.as_deref())?;
            let order = match cfg.order {
                ToyOrder::Sequential => Order::Sequential,
                ToyOrder::Shuffled => Order::Shuffled,
            };
            let ds = gen_toy_clusters(cfg.seed, order);
            save_csv(&dir.join("toy.csv"), &ds, true)?;
            write_manifest(&dir, "gen toy", &cfg, &["toy.csv".into()], json!({ "rows": ds.n(), "dim": ds.dim() }))?;
            say(&format!("wrote {} rows to {}", ds.n(), dir.join("toy.csv").display()));
            Ok(())
        }
        GenCommand::Msda(args) => {
            let defaults = GenMsdaConfig {
                domains: 3,
                classes: 5,
                dim: 8,
                shift_scale: 4.0,
                class_spread: 2.0,
                target_offset: 0.3,
                n_per_domain: 4000,
                seed: 1,
                out: None,
            };
            let cfg: GenMsdaConfig = resolve(&defaults, args.config.as_deref(), &args)?;
            let spec = MsdaSpec {
                n_sources: cfg.domains,
                n_classes: cfg.classes,
                dim: cfg.dim,
                shift_scale: cfg.shift_scale,
                class_spread: cfg.class_spread,
                target_offset: cfg.target_offset,
                n_per_domain: cfg.n_per_domain,
                seed: cfg.seed,
            };
            let data = gen_msda_synthetic(&spec)?;
            let dir = out_dir(cfg.out.as_deref())?;
            let mut outputs = Vec::new();
            for (s, ds) in data.sources.iter().enumerate() {
                let name = format!("source{s}.csv");
                save_csv(&dir.join(&name), ds, true)?;
                outputs.push(name);
            }
            save_csv(&dir.join("target.csv"), &data.target, true)?;
            outputs.push("target.csv".into());
            write_manifest(&dir, "gen msda", &cfg, &outputs, json!({ "rows_per_domain": cfg.n_per_domain }))?;
            say(&format!("wrote {} files to {}", outputs.len(), dir.display()));
            Ok(())
        }
    }
}
