//! Run configuration: JSON files layered over defaults, then dotted
//! `key=value` overrides. Unknown keys are rejected at every layer.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::{Error, Result};

/// Parses an override value as JSON, falling back to a bare string so
/// `camera_preset=ideal` works without quoting.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dot separated) in `root`; the key must already exist.
pub fn set_dotted(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let mut walked = Vec::new();
    for key in path.split('.') {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!("cannot set {path:?}: {:?} is not an object", walked.join(".")))
        })?;
        let known: Vec<String> = obj.keys().cloned().collect();
        cur = obj
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown config key {path:?} (valid here: {})", known.join(", "))))?;
        walked.push(key);
    }
    *cur = value;
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not of the form key=value")))?;
    if k.trim().is_empty() {
        return Err(Error::Config(format!("override {s:?} has an empty key")));
    }
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

fn merge(base: &mut Value, layer: &Value, at: &str) -> Result<()> {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                let slot = b
                    .get_mut(k)
                    .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (b, l) => {
            *b = l.clone();
            Ok(())
        }
    }
}

/// Resolves a configuration: defaults, then the optional JSON layer, then
/// overrides in order. The result is validated by deserialization.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Value>, overrides: &[String]) -> Result<T> {
    let mut v = serde_json::to_value(T::default())?;
    if let Some(layer) = file {
        if !layer.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        merge(&mut v, layer, "")?;
    }
    for o in overrides {
        let (k, val) = parse_override(o)?;
        set_dotted(&mut v, &k, val)?;
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
}

/// Reads a JSON config file.
pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::GeneratorConfig;
    use crate::trainer::TrainConfig;
    use serde_json::json;

    #[test]
    fn overrides_apply_in_order() {
        let c: TrainConfig = resolve(
            Some(&json!({"epochs": 5, "encoder": {"channels": 16}})),
            &["epochs=7".into(), "weights.kinematic=0.5".into(), "augment_flip=false".into()],
        )
        .unwrap();
        assert_eq!((c.epochs, c.encoder.channels, c.weights.kinematic, c.augment_flip), (7, 16, 0.5, false));
        assert_eq!(c.encoder.window, 27);
    }

    #[test]
    fn bare_strings_and_unknown_keys() {
        let g: GeneratorConfig = resolve(None, &["camera_preset=ideal".into()]).unwrap();
        assert_eq!(g.camera_preset, "ideal");
        for bad in ["epoch=3", "weights.kc=1", "epochs.x=1", "epochs"] {
            let e = resolve::<TrainConfig>(None, &[bad.into()]).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{bad}: {e}");
        }
        assert!(resolve::<TrainConfig>(Some(&json!({"encoder": {"chanels": 3}})), &[]).is_err());
        assert!(resolve::<TrainConfig>(None, &["epochs=\"x\"".into()]).is_err());
    }
}
