//! Output directory, manifests, JSON-lines logs and CSV input helpers.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use wgmm::datasets::{load_csv, CsvOptions, LabelColumn, LabeledDataset};
use wgmm::io::Meta;

use crate::{CliError, CliResult};

pub const OUT_DIR_ENV: &str = "WGMM_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "wgmm-out";

/// `--out`/config value, else the environment default, else `wgmm-out`.
pub fn out_dir(configured: Option<&Path>) -> CliResult<PathBuf> {
    let dir = configured
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Data(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn meta(seed: u64) -> Meta {
    Meta { seed: Some(seed), created: Some(now()), iters: None }
}

/// Writes `manifest.json`: the command, the resolved config, the files
/// written and a result summary.
pub fn write_manifest<C: Serialize>(dir: &Path, command: &str, config: &C, outputs: &[String], summary: Value) -> CliResult<()> {
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "outputs": outputs,
        "summary": summary,
        "meta": { "created": now() },
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

/// Append-only JSON-lines writer.
pub struct JsonLines {
    out: BufWriter<File>,
}

impl JsonLines {
    /// Starts a fresh log, or continues an existing one when `append` is set.
    pub fn open(path: &Path, append: bool) -> CliResult<Self> {
        let file = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> CliResult<()> {
        serde_json::to_writer(&mut self.out, record).map_err(|e| CliError::Data(e.to_string()))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> CliResult<()> {
        Ok(self.out.flush()?)
    }
}

fn header_has(path: &Path, name: &str) -> CliResult<bool> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut first = String::new();
    BufReader::new(file).read_line(&mut first)?;
    Ok(first.trim_end().split(',').any(|c| c.trim() == name))
}

/// Loads a CSV file. With `label = None` a header column named `label` is
/// still split off, so generated files can be fed back unchanged.
pub fn read_csv(path: &Path, has_header: bool, label: Option<&str>) -> CliResult<LabeledDataset> {
    let label = match label {
        Some(name) => Some(LabelColumn::Name(name.to_string())),
        None if has_header && header_has(path, "label")? => Some(LabelColumn::Name("label".into())),
        None => None,
    };
    load_csv(path, &CsvOptions { has_header, label })
        .map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))
}

/// Prints one line to stdout; a closed pipe is not an error.
pub fn say(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
}

pub fn say_json(value: &Value) {
    say(&serde_json::to_string_pretty(value).expect("summary serializes"));
}
