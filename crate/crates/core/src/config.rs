//! JSON configuration files with dotted `key=value` overrides.
//!
//! Resolution starts from the type's defaults, overlays the file, then applies
//! overrides in order. Every key must already exist in the resolved tree, so
//! typos fail before any computation.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Sets `path` (dot separated, array indices allowed) inside `root` to `raw`.
/// `raw` is read as JSON when it parses, otherwise as a bare string.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    if path.is_empty() {
        return Err(Error::Config("empty override key".into()));
    }
    let mut node = root;
    for part in path.split('.') {
        node = match node {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?,
            Value::Array(items) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("`{part}` in `{path}` is not an array index")))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| Error::Config(format!("index {i} out of range in `{path}` (length {len})")))?
            }
            _ => return Err(Error::Config(format!("`{path}` descends into a scalar"))),
        };
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))
}

fn config_err(e: serde_json::Error) -> Error {
    Error::Config(e.to_string())
}

/// Defaults, then the optional file, then `overrides`.
pub fn resolve<T>(file: Option<&Path>, overrides: &[String]) -> Result<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let base: T = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(config_err)?
        }
        None => T::default(),
    };
    let mut tree = serde_json::to_value(&base)?;
    for o in overrides {
        let (k, v) = parse_override(o)?;
        apply_override(&mut tree, k, v)?;
    }
    serde_json::from_value(tree).map_err(config_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Inner {
        rate: f64,
        name: String,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    struct Outer {
        steps: usize,
        inner: Inner,
        list: Vec<u64>,
    }

    #[test]
    fn defaults_without_file_or_overrides() {
        assert_eq!(resolve::<Outer>(None, &[]).unwrap(), Outer::default());
    }

    #[test]
    fn nested_and_indexed_overrides() {
        let o: Outer = resolve(
            None,
            &["steps=7".into(), "inner.rate=0.5".into(), "inner.name=abc".into(), "list=[1,2]".into(), "list.1=9".into()],
        )
        .unwrap();
        assert_eq!(o.steps, 7);
        assert_eq!(o.inner, Inner { rate: 0.5, name: "abc".into() });
        assert_eq!(o.list, vec![1, 9]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(resolve::<Outer>(None, &["inner.rat=1".into()]), Err(Error::Config(_))));
        assert!(matches!(resolve::<Outer>(None, &["steps.x=1".into()]), Err(Error::Config(_))));
        assert!(matches!(resolve::<Outer>(None, &["steps".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn ill_typed_values_are_rejected() {
        assert!(matches!(resolve::<Outer>(None, &["steps=many".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn file_is_overlaid_on_defaults_and_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"inner": {"rate": 2.0}}"#).unwrap();
        let o: Outer = resolve(Some(&path), &["steps=3".into()]).unwrap();
        assert_eq!((o.steps, o.inner.rate), (3, 2.0));
        std::fs::write(&path, r#"{"bogus": 1}"#).unwrap();
        assert!(matches!(resolve::<Outer>(Some(&path), &[]), Err(Error::Config(_))));
        assert!(matches!(resolve::<Outer>(Some(&dir.path().join("none.json")), &[]), Err(Error::Config(_))));
    }
}
