//! Output directory layout: `config.json` (resolved config), CSV tables and
//! `summary.json`. The wall-clock timestamp lives only in `summary.json`.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::CliError;

pub fn prepare(out: &Path, config: &ExperimentConfig) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), config.to_json() + "\n")?;
    Ok(())
}

pub fn write_file(out: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(out.join(name), bytes)?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a, T: Serialize> {
    passed: bool,
    report: &'a T,
    timestamp: u64,
}

pub fn write_summary<T: Serialize>(out: &Path, passed: bool, report: &T) -> Result<(), CliError> {
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let text = serde_json::to_string_pretty(&Summary { passed, report, timestamp }).expect("report serializes");
    fs::write(out.join("summary.json"), text + "\n")?;
    Ok(())
}
