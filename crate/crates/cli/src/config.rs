use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Effective configuration of one command: file values overridden by flags.
pub struct Resolved<C> {
    pub config: C,
    pub seed: u64,
    pub hash: String,
}

/// Reads the optional JSON config file, overlays every flag that was set on
/// the command line and deserializes the result. A top-level `seed` key in
/// the file is used unless `--seed` is given.
pub fn resolve<A: Serialize, C: Serialize + DeserializeOwned>(
    file: Option<&Path>,
    flags: &A,
    seed_flag: Option<u64>,
) -> Result<Resolved<C>, CliError> {
    let mut merged = match file {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => {
                    return Err(CliError::Validation(format!(
                        "{}: config must be a JSON object",
                        p.display()
                    )))
                }
                Err(e) => return Err(CliError::Validation(format!("{}: {e}", p.display()))),
            }
        }
        None => Map::new(),
    };
    let file_seed = match merged.remove("seed") {
        None => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| {
            CliError::Validation("config seed must be a non-negative integer".into())
        })?),
    };
    let Value::Object(set) =
        serde_json::to_value(flags).map_err(|e| CliError::Validation(e.to_string()))?
    else {
        unreachable!("flag structs serialize to objects")
    };
    merged.extend(set);
    let config: C = serde_json::from_value(Value::Object(merged))
        .map_err(|e| CliError::Validation(format!("config: {e}")))?;
    let seed = seed_flag.or(file_seed).unwrap_or(0);
    let canonical =
        serde_json::to_string(&config).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    h.update(b"\0seed=");
    h.update(seed.to_string().as_bytes());
    let hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(Resolved { config, seed, hash })
}

#[derive(Serialize)]
struct Envelope<'a, C, R> {
    command: &'a str,
    schema_version: u32,
    seed: u64,
    config_hash: &'a str,
    config: &'a C,
    result: &'a R,
    /// The only field that changes between identical runs.
    timestamp: u64,
}

pub fn report_json<C: Serialize, R: Serialize>(
    command: &str,
    run: &Resolved<C>,
    result: &R,
) -> Result<String, CliError> {
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let env = Envelope {
        command,
        schema_version: SCHEMA_VERSION,
        seed: run.seed,
        config_hash: &run.hash,
        config: &run.config,
        result,
        timestamp,
    };
    serde_json::to_string_pretty(&env)
        .map(|s| s + "\n")
        .map_err(|e| CliError::Validation(e.to_string()))
}
