//! Compact JSON writer that prints every float with 17 significant digits.
//!
//! `serde_json` emits the shortest round-tripping representation; the episode
//! and checkpoint formats instead pin a fixed-width decimal form so that files
//! are byte-stable and parse back to the identical bit pattern.

use serde::Serialize;
use serde_json::Value;
use std::fmt::Write;

use crate::error::{Error, Result};

/// Formats `x` as a decimal with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Serializes `value` as a single-line JSON document.
pub fn to_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&v, &mut out)?;
    Ok(out)
}

fn write_value(v: &Value, out: &mut String) -> Result<()> {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                let x = n.as_f64().expect("f64 number");
                if !x.is_finite() {
                    return Err(Error::NonFinite("cannot encode non-finite float".into()));
                }
                out.push_str(&fmt_f64(x));
            } else {
                write!(out, "{n}").expect("write to String");
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s)?),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out)?;
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, item)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k)?);
                out.push(':');
                write_value(item, out)?;
            }
            out.push('}');
        }
    }
    Ok(())
}
