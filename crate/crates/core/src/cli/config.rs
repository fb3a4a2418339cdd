//! Strict JSON configs layered over a preset.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::{Error, Result};

/// Recursively overwrites `base` with `patch`; objects merge key by key,
/// anything else replaces.
pub fn merge_json(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// `base` with the file at `path` merged over it. Unknown keys anywhere
/// survive the merge and are then rejected by the strict target type.
pub fn load_config<T: Serialize + DeserializeOwned>(base: &T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(serde_json::from_value(serde_json::to_value(base)?)?);
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let patch: Value =
        serde_json::from_str(&text).map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
    if !patch.is_object() {
        return Err(Error::validation(format!("{}: config must be a JSON object", path.display())));
    }
    let mut v = serde_json::to_value(base)?;
    merge_json(&mut v, &patch);
    serde_json::from_value(v).map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TrainingConfig;

    #[test]
    fn file_overrides_preset_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"batch_size": 8, "optimizer": {"learning_rate": 0.01}}"#).unwrap();
        let c: TrainingConfig = load_config(&TrainingConfig::desk(), Some(&p)).unwrap();
        assert_eq!(c.batch_size, 8);
        assert_eq!(c.optimizer.learning_rate, 0.01);
        assert_eq!(c.optimizer.clip_norm, TrainingConfig::desk().optimizer.clip_norm);

        std::fs::write(&p, r#"{"objective": {"weights": {"gamma": 3}}}"#).unwrap();
        let err = load_config(&TrainingConfig::desk(), Some(&p)).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("gamma"), "{err}");
    }
}
