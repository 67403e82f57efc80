//! Serde adapter for dB values that may be `+∞` (a noiseless link).
//!
//! JSON has no infinity literal, so infinite values are written as the
//! string `"inf"`; finite values stay plain numbers.

use serde::{de, Deserialize, Deserializer, Serializer};

pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
    if value.is_infinite() && *value > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*value)
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Text(t) => match t.trim().to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
            other => other
                .parse()
                .map_err(|_| de::Error::custom(format!("invalid dB value `{t}`"))),
        },
    }
}

/// Parses a dB value from text, accepting `inf`.
pub fn parse_db(text: &str) -> Option<f64> {
    match text.trim().to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" => Some(f64::INFINITY),
        other => other.parse().ok(),
    }
}

/// Formats a dB value, writing `inf` for `+∞`.
pub fn format_db(value: f64) -> String {
    if value == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{value}")
    }
}
