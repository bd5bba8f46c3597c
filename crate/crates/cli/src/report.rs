//! The run report: everything needed to rerun a command and check that the
//! rerun saw the same input.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

pub const RUN_REPORT_SCHEMA: &str = "glmcert/run-report/v1";
pub const POOL_SCHEMA: &str = "glmcert/pool/v1";
pub const DATASET_SCHEMA: &str = "glmcert/dataset/v1";

pub fn now_rfc3339() -> String {
    OffsetDateTime::now_utc().format(&Rfc3339).unwrap_or_default()
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub schema: &'static str,
    pub tool_version: &'static str,
    pub command: String,
    pub input: Value,
    /// SHA-256 of the data file bytes, or of the canonical generator spec.
    pub fingerprint: String,
    /// 1-based input columns dropped as constant before solving.
    pub dropped_columns: Vec<usize>,
    pub config: Value,
    /// Argument vector that reruns this command with every setting explicit.
    pub reproduce: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificate: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub support_names: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Value>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| anyhow::anyhow!("cannot write {}: {e}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).map_err(|e| anyhow::anyhow!("cannot write {}: {e}", path.display()))
}
