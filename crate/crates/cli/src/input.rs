//! Flag values that need more than clap's built-in parsing, and turning the
//! input flags into a problem instance.

use std::fmt;
use std::path::{Path, PathBuf};

use glmcert::problem::{preprocess_with_report, Constraints};
use glmcert::{generate_synthetic, load_csv, BatchSize, LossKind, ProblemInstance, SyntheticSpec};
use sha2::{Digest, Sha256};

/// A bad flag value. Reported with exit code 64 like clap's own errors.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn parse_loss(s: &str) -> Result<LossKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "squared" => Ok(LossKind::Squared),
        "logistic" => Ok(LossKind::Logistic),
        _ => Err(format!("unknown loss '{s}' (expected squared or logistic)")),
    }
}

pub fn loss_name(loss: LossKind) -> &'static str {
    match loss {
        LossKind::Squared => "squared",
        LossKind::Logistic => "logistic",
    }
}

/// `n=200,p=100,k=10,rho=0.9,loss=squared,seed=1[,snr=5]`. `n`, `p` and `k`
/// are required.
pub fn parse_gen_spec(s: &str) -> Result<SyntheticSpec, String> {
    let (mut n, mut p, mut k) = (None, None, None);
    let mut spec = SyntheticSpec::new(0, 0, 0, 0.0, LossKind::Squared, 0);
    for part in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (key, value) = part.split_once('=').ok_or_else(|| format!("expected key=value, got '{part}'"))?;
        let bad = |e: &dyn fmt::Display| format!("bad value for {key}: {e}");
        match key.trim() {
            "n" => n = Some(value.parse::<usize>().map_err(|e| bad(&e))?),
            "p" => p = Some(value.parse::<usize>().map_err(|e| bad(&e))?),
            "k" => k = Some(value.parse::<usize>().map_err(|e| bad(&e))?),
            "rho" => spec.correlation = value.parse().map_err(|e| bad(&e))?,
            "snr" => spec.snr = value.parse().map_err(|e| bad(&e))?,
            "seed" => spec.seed = value.parse().map_err(|e| bad(&e))?,
            "loss" => spec.loss = parse_loss(value)?,
            other => return Err(format!("unknown generator key '{other}' (expected n, p, k, rho, snr, seed, loss)")),
        }
    }
    spec.n = n.ok_or("generator spec needs n")?;
    spec.p = p.ok_or("generator spec needs p")?;
    spec.k = k.ok_or("generator spec needs k")?;
    Ok(spec)
}

/// Canonical text form; parsing it gives back the same spec.
pub fn format_gen_spec(spec: &SyntheticSpec) -> String {
    format!(
        "n={},p={},k={},rho={:?},loss={},seed={},snr={:?}",
        spec.n,
        spec.p,
        spec.k,
        spec.correlation,
        loss_name(spec.loss),
        spec.seed,
        spec.snr
    )
}

pub fn parse_batch_size(s: &str) -> Result<BatchSize, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(BatchSize::Auto);
    }
    match s.parse::<usize>() {
        Ok(0) => Err("batch size must be at least 1".into()),
        Ok(b) => Ok(BatchSize::Fixed(b)),
        Err(_) => Err(format!("expected a positive integer or 'auto', got '{s}'")),
    }
}

/// Bytes, with an optional decimal (`KB`, `MB`, `GB`, `TB`) or binary
/// (`KiB`, `MiB`, `GiB`, `TiB`) suffix.
pub fn parse_memory(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let split = t.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let value: f64 = num.trim().parse().map_err(|_| format!("bad memory size '{s}'"))?;
    let scale: f64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1.0,
        "kb" => 1e3,
        "mb" => 1e6,
        "gb" => 1e9,
        "tb" => 1e12,
        "kib" => 1024.0,
        "mib" => 1024f64.powi(2),
        "gib" => 1024f64.powi(3),
        "tib" => 1024f64.powi(4),
        other => return Err(format!("unknown memory unit '{other}'")),
    };
    let bytes = value * scale;
    if !(bytes >= 1.0) || !bytes.is_finite() {
        return Err(format!("memory size must be at least one byte, got '{s}'"));
    }
    Ok(bytes as u64)
}

/// One entry of a comma-separated batch size list.
pub fn parse_positive(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("batch sizes must be positive integers, got '{s}'")),
        Ok(b) => Ok(b),
    }
}

#[derive(Debug, Clone)]
pub enum Source {
    Generator(SyntheticSpec),
    File { path: PathBuf, response: String },
}

pub struct Loaded {
    pub instance: ProblemInstance,
    /// 1-based input columns removed as constant.
    pub dropped: Vec<usize>,
    pub fingerprint: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Builds the preprocessed instance. Data files are fingerprinted by content,
/// generated instances by their canonical spec.
pub fn load(source: &Source, loss: LossKind, constraints: Constraints) -> anyhow::Result<Loaded> {
    let (raw, fingerprint) = match source {
        Source::Generator(spec) => {
            (generate_synthetic(spec)?, sha256_hex(format_gen_spec(spec).as_bytes()))
        }
        Source::File { path, response } => {
            let bytes = std::fs::read(path).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
            (load_csv(path, response, loss)?, sha256_hex(&bytes))
        }
    };
    let pre = preprocess_with_report(&raw);
    let instance = pre.instance.with_constraints(constraints)?;
    Ok(Loaded { instance, dropped: pre.dropped.iter().map(|j| j + 1).collect(), fingerprint })
}

/// `dir/stem` of `path` with the extension removed.
pub fn stem_prefix(path: &Path) -> PathBuf {
    path.with_extension("")
}

pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
