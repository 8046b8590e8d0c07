//! `--config` documents: one flat JSON object whose keys are the field names
//! of `TrainConfig`, `ArchProfile` and `AugmentPolicy`.

use std::fs;
use std::path::Path;

use deeptransfer::data::AugmentPolicy;
use deeptransfer::train::TrainConfig;
use deeptransfer::ArchProfile;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Reads a config file into its raw key/value map. Only the object shape is
/// checked here; keys are checked when the document is merged.
pub fn read_config(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Config(format!("{}: top level must be an object", path.display()))),
        Err(e) => Err(CliError::Config(format!("{}: {e}", path.display()))),
    }
}

fn field_names<T: Serialize + Default>() -> Vec<String> {
    match serde_json::to_value(T::default()).expect("config types serialise") {
        Value::Object(map) => map.keys().cloned().collect(),
        _ => unreachable!("config types are structs"),
    }
}

/// Overlays `keys` of `doc` onto `base`.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, doc: &Map<String, Value>, keys: &[String]) -> Result<T, CliError> {
    let Value::Object(mut merged) = serde_json::to_value(base).expect("config types serialise") else {
        unreachable!("config types are structs")
    };
    for key in keys {
        if let Some(v) = doc.get(key) {
            merged.insert(key.clone(), v.clone());
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Config(e.to_string()))
}

/// Splits a flat config document over the three config types, on top of
/// the given defaults. Unknown keys are rejected.
pub fn merge(
    doc: &Map<String, Value>,
    train: &TrainConfig,
    profile: &ArchProfile,
) -> Result<(TrainConfig, ArchProfile), CliError> {
    let mut train_keys = field_names::<TrainConfig>();
    train_keys.retain(|k| k != "augment");
    let profile_keys = field_names::<ArchProfile>();
    let augment_keys = field_names::<AugmentPolicy>();
    if let Some(unknown) = doc
        .keys()
        .find(|k| !train_keys.contains(k) && !profile_keys.contains(k) && !augment_keys.contains(k))
    {
        return Err(CliError::Config(format!("unknown config key `{unknown}`")));
    }
    let mut merged = overlay(train, doc, &train_keys)?;
    merged.augment = overlay(&train.augment, doc, &augment_keys)?;
    Ok((merged, overlay(profile, doc, &profile_keys)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(text: &str) -> Map<String, Value> {
        serde_json::from_str(text).unwrap()
    }

    #[test]
    fn keys_route_to_their_types() {
        let (t, p) = merge(
            &doc(r#"{"epochs": 25, "b_size": 10, "width_divisor": 4, "crop_fraction": 0.8}"#),
            &TrainConfig { epochs: 3, ..TrainConfig::default() },
            &ArchProfile::default(),
        )
        .unwrap();
        assert_eq!((t.epochs, t.b_size, p.width_divisor), (25, 10, 4));
        assert_eq!(t.augment.crop_fraction, 0.8);
        assert_eq!(t.n_ti, 500);
    }

    #[test]
    fn unknown_and_mistyped_keys_fail() {
        let base = (TrainConfig::default(), ArchProfile::default());
        assert!(merge(&doc(r#"{"epoch": 2}"#), &base.0, &base.1).is_err());
        assert!(merge(&doc(r#"{"epochs": "many"}"#), &base.0, &base.1).is_err());
        assert!(merge(&doc(r#"{"augment": {}}"#), &base.0, &base.1).is_err());
    }
}
