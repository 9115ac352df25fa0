//! Layered JSON configuration: built-in defaults, then a config file, then
//! command-line overrides, addressed by dotted key paths.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use rover_sysid::{Error, Result};

/// Leaf keys of `value` with their values, in document order. Objects are
/// descended into; arrays, scalars and empty objects are leaves.
pub fn flatten(value: &Value) -> Vec<(String, Value)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
        match v {
            Value::Object(map) if !map.is_empty() => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => out.push((prefix.to_string(), v.clone())),
        }
    }
    let mut out = Vec::new();
    walk("", value, &mut out);
    out
}

/// Parses a command-line value: JSON if it parses, otherwise a bare string.
pub fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// Resolved configuration tree plus the rules for which keys may be set.
pub struct Layered {
    value: Value,
    /// Keys whose value is a map that accepts arbitrary entries.
    open_maps: &'static [&'static str],
}

impl Layered {
    pub fn new<T: Serialize>(defaults: &T, open_maps: &'static [&'static str]) -> Result<Self> {
        Ok(Layered { value: serde_json::to_value(defaults)?, open_maps })
    }

    fn check_key(&self, key: &str) -> Result<()> {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &self.value;
        for (i, part) in parts.iter().enumerate() {
            let prefix = parts[..i].join(".");
            if i > 0 && self.open_maps.contains(&prefix.as_str()) {
                return if i + 1 == parts.len() { Ok(()) } else { Err(unknown(key)) };
            }
            match node {
                Value::Object(map) => match map.get(*part) {
                    Some(child) => node = child,
                    None => return Err(unknown(key)),
                },
                _ => return Err(unknown(key)),
            }
        }
        if matches!(node, Value::Object(m) if !m.is_empty()) {
            return Err(Error::Argument(format!("config key `{key}` is a section; set one of its fields")));
        }
        Ok(())
    }

    /// Sets `key` (dotted path) to `value`.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        self.check_key(key)?;
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut self.value;
        for part in &parts[..parts.len() - 1] {
            node = node
                .as_object_mut()
                .expect("checked path")
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
        }
        node.as_object_mut().expect("checked path").insert(parts[parts.len() - 1].to_string(), value);
        Ok(())
    }

    /// Applies every leaf of a config file document.
    pub fn merge_file(&mut self, doc: &Value) -> Result<()> {
        if !doc.is_object() {
            return Err(Error::Format("config file must hold a JSON object".into()));
        }
        for (key, value) in flatten(doc) {
            if self.open_maps.contains(&key.as_str()) && value == Value::Object(Map::new()) {
                continue;
            }
            self.set(&key, value)?;
        }
        Ok(())
    }

    #[cfg(test)]
    pub fn value(&self) -> &Value {
        &self.value
    }

    pub fn resolve<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.value.clone())
            .map_err(|e| Error::Argument(format!("invalid configuration: {e}")))
    }
}

fn unknown(key: &str) -> Error {
    Error::Argument(format!("unknown config key `{key}`"))
}

/// Splits `key=value`.
pub fn split_assignment(text: &str) -> Result<(&str, &str)> {
    text.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::Argument(format!("expected key=value, got `{text}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn layered() -> Layered {
        Layered::new(&json!({"a": 1, "b": {"c": [1, 2], "d": null}, "maps": {}}), &["maps"]).unwrap()
    }

    #[test]
    fn flatten_lists_leaves() {
        let keys: Vec<String> = flatten(layered().value()).into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, ["a", "b.c", "b.d", "maps"]);
    }

    #[test]
    fn overrides_replace_leaves_and_reject_unknown_keys() {
        let mut l = layered();
        l.set("b.c", parse_value("[3]")).unwrap();
        l.set("b.d", parse_value("loose_sand")).unwrap();
        l.set("maps.x", parse_value("path/to/file")).unwrap();
        assert_eq!(l.value(), &json!({"a": 1, "b": {"c": [3], "d": "loose_sand"}, "maps": {"x": "path/to/file"}}));
        assert!(l.set("b.e", json!(1)).is_err());
        assert!(l.set("b", json!(1)).is_err());
        assert!(l.set("maps.x.y", json!(1)).is_err());
    }

    #[test]
    fn file_then_override_precedence() {
        let mut l = layered();
        l.merge_file(&json!({"a": 5, "b": {"c": [9]}})).unwrap();
        l.set("a", json!(7)).unwrap();
        assert_eq!(l.value()["a"], json!(7));
        assert_eq!(l.value()["b"]["c"], json!([9]));
        assert!(l.merge_file(&json!({"zzz": 1})).is_err());
    }

    #[test]
    fn assignments() {
        assert_eq!(split_assignment("a.b=1=2").unwrap(), ("a.b", "1=2"));
        assert!(split_assignment("novalue").is_err());
    }
}
