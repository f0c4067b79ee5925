//! Canonical JSON rendering: object keys sorted, floats fixed to nine
//! significant digits. Two values that serialize equal here are treated as
//! byte-identical artifacts (topology files, event logs, reports).

use serde::Serialize;
use serde_json::Value;

/// Number of significant digits kept for every non-integer float.
pub const FLOAT_SIG_DIGITS: usize = 9;

/// Rounds `x` to [`FLOAT_SIG_DIGITS`] significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{:.*e}", FLOAT_SIG_DIGITS - 1, x)
        .parse()
        .unwrap_or(x)
}

fn format_float(x: f64) -> String {
    let r = round_sig(x);
    if r == 0.0 {
        // collapses -0.0
        return "0".to_string();
    }
    let s = format!("{r}");
    if s.contains('e') || s.contains('E') {
        // Display never uses exponents for f64, but stay defensive about it.
        return format!("{r:e}");
    }
    s
}

fn write_value(out: &mut String, v: &Value, pretty: bool, depth: usize) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_i64() || n.is_u64() {
                out.push_str(&n.to_string());
            } else {
                out.push_str(&format_float(n.as_f64().unwrap_or(0.0)));
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                newline(out, pretty, depth + 1);
                write_value(out, item, pretty, depth + 1);
            }
            newline(out, pretty, depth);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                newline(out, pretty, depth + 1);
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push(':');
                if pretty {
                    out.push(' ');
                }
                write_value(out, &map[*k], pretty, depth + 1);
            }
            newline(out, pretty, depth);
            out.push('}');
        }
    }
}

fn newline(out: &mut String, pretty: bool, depth: usize) {
    if pretty {
        out.push('\n');
        for _ in 0..depth {
            out.push_str("  ");
        }
    }
}

/// Renders a JSON value canonically. `pretty` indents by two spaces;
/// compact output has no whitespace at all (used for JSON Lines).
pub fn render(v: &Value, pretty: bool) -> String {
    let mut out = String::new();
    write_value(&mut out, v, pretty, 0);
    out
}

/// Serializes any value into canonical JSON.
pub fn to_string<T: Serialize + ?Sized>(value: &T, pretty: bool) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(render(&v, pretty))
}

/// Canonical form of an arbitrary JSON text.
pub fn canonicalize_str(text: &str, pretty: bool) -> serde_json::Result<String> {
    let v: Value = serde_json::from_str(text)?;
    Ok(render(&v, pretty))
}
