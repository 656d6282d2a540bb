//! Settings from a JSON config file, overridden key by key by command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Merges `flags` over the config file at `path`.
///
/// Every settings struct has only optional fields, so an absent flag serializes
/// to null and leaves the file's value in place. Unknown or ill-typed keys in the
/// file are usage errors.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: &T, path: Option<&Path>) -> Result<T, CliError> {
    let mut merged = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", p.display())))?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", p.display())))?;
            let Value::Object(map) = value else {
                return Err(CliError::Usage(format!("config {} must be a JSON object", p.display())));
            };
            serde_json::from_value::<T>(Value::Object(map.clone()))
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
            map
        }
        None => Map::new(),
    };
    let Value::Object(over) = serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))? else {
        unreachable!("settings serialize to objects")
    };
    for (k, v) in over {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(e.to_string()))
}
