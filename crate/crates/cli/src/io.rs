use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use carma_hawkes::simulate::EventTimes;
use carma_hawkes::ModelSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub fn read_model(path: &Path) -> Result<ModelSpec, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let spec: ModelSpec =
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

pub fn read_events(path: &Path) -> Result<EventTimes, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let col = rdr
        .headers()
        .map_err(|e| CliError::input(e.to_string()))?
        .iter()
        .position(|h| h.trim() == "time")
        .ok_or_else(|| CliError::input(format!("{}: no `time` column", path.display())))?;
    let mut times = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::input(e.to_string()))?;
        let field = rec.get(col).unwrap_or("").trim();
        let t: f64 = field
            .parse()
            .map_err(|_| CliError::input(format!("{}: row {}: bad time {field:?}", path.display(), i + 2)))?;
        times.push(t);
    }
    Ok(EventTimes::new(times)?)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::output(path, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::output(path, e))?))
}

/// CSV with a header row; floats use Rust's shortest round-trip formatting.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header).map_err(|e| CliError::output(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| CliError::output(path, e))?;
    }
    w.flush().map_err(|e| CliError::output(path, e))
}

pub fn write_events(path: &Path, events: &EventTimes) -> Result<(), CliError> {
    write_csv(path, &["time"], events.times().iter().map(|t| vec![t.to_string()]))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::output(path, e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| CliError::output(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| CliError::output(path, e))
}

/// Everything needed to re-run a command: the subcommand, its flags as
/// given, and the model it read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub model: Option<ModelSpec>,
    pub flags: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub timestamp: String,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
