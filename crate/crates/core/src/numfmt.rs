//! Lossless decimal formatting for JSON artifacts.
//!
//! Floats are written with 17 significant digits, which round-trips every
//! finite `f64` exactly when read back with a correctly rounded parser.

use serde::ser::{Error as _, SerializeSeq};
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

/// `x` in scientific notation with 17 significant digits.
pub fn f17(x: f64) -> String {
    format!("{x:.16e}")
}

fn raw(x: f64) -> Result<Box<RawValue>, String> {
    if !x.is_finite() {
        return Err(format!("cannot serialize non-finite value {x}"));
    }
    RawValue::from_string(f17(x)).map_err(|e| e.to_string())
}

/// Serializes a float with [`f17`].
pub struct F17(pub f64);

impl Serialize for F17 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        raw(self.0).map_err(S::Error::custom)?.serialize(s)
    }
}

/// Serializes a float slice with [`f17`] per element.
pub struct F17Slice<'a>(pub &'a [f64]);

impl Serialize for F17Slice<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.0.len()))?;
        for &x in self.0 {
            seq.serialize_element(&raw(x).map_err(S::Error::custom)?)?;
        }
        seq.end()
    }
}
