//! Cell values as returned by SQLite, plus the canonical form used for
//! result comparison and for rendering values inside prompts.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// A single SQLite cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SqlValue {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(BlobValue),
}

/// Blob payload, serialized as `{"blob": "<hex>"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobValue {
    #[serde(with = "hex_bytes")]
    pub blob: Vec<u8>,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        let mut out = String::with_capacity(bytes.len() * 2);
        for b in bytes {
            out.push_str(&format!("{b:02x}"));
        }
        s.serialize_str(&out)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        if s.len() % 2 != 0 {
            return Err(serde::de::Error::custom("odd-length hex string"));
        }
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(serde::de::Error::custom))
            .collect()
    }
}

impl From<rusqlite::types::ValueRef<'_>> for SqlValue {
    fn from(v: rusqlite::types::ValueRef<'_>) -> Self {
        use rusqlite::types::ValueRef;
        match v {
            ValueRef::Null => SqlValue::Null,
            ValueRef::Integer(i) => SqlValue::Integer(i),
            ValueRef::Real(f) => SqlValue::Real(f),
            ValueRef::Text(t) => SqlValue::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => SqlValue::Blob(BlobValue { blob: b.to_vec() }),
        }
    }
}

impl SqlValue {
    /// Plain rendering used in schema text (`VALUES: [...]`) and the value
    /// index: text is emitted raw, numbers in their shortest round-trip form.
    pub fn display_plain(&self) -> String {
        match self {
            SqlValue::Null => "None".to_string(),
            SqlValue::Integer(i) => i.to_string(),
            SqlValue::Real(f) => python_float(*f),
            SqlValue::Text(t) => t.clone(),
            SqlValue::Blob(b) => format!("b'<{} bytes>'", b.blob.len()),
        }
    }

    /// Python `repr` of the value, as it appears inside a result tuple.
    pub fn python_repr(&self) -> String {
        match self {
            SqlValue::Text(t) => python_str_repr(t),
            other => other.display_plain(),
        }
    }

    pub fn canonical(&self) -> CanonValue {
        match self {
            SqlValue::Null => CanonValue::Null,
            SqlValue::Integer(i) => CanonValue::Int(*i),
            SqlValue::Real(f) => canonical_real(*f),
            SqlValue::Text(t) => CanonValue::Text(t.clone()),
            SqlValue::Blob(b) => CanonValue::Blob(b.blob.clone()),
        }
    }
}

/// Significant digits kept when canonicalizing reals. Values that agree to
/// roughly one part in 1e9 land in the same bucket, and bucket equality is a
/// true equivalence relation (unlike a raw tolerance test).
pub const CANONICAL_SIG_DIGITS: usize = 10;

fn canonical_real(f: f64) -> CanonValue {
    if f.is_nan() {
        return CanonValue::Real(CanonFloat(f64::NAN));
    }
    if f.is_infinite() {
        return CanonValue::Real(CanonFloat(f));
    }
    let rounded: f64 = format!("{:.*e}", CANONICAL_SIG_DIGITS - 1, f)
        .parse()
        .unwrap_or(f);
    if rounded.fract() == 0.0 && rounded.abs() < 9.2e18 {
        CanonValue::Int(rounded as i64)
    } else {
        CanonValue::Real(CanonFloat(if rounded == 0.0 { 0.0 } else { rounded }))
    }
}

/// Comparable cell value: integers and integral reals unify, reals are
/// rounded to [`CANONICAL_SIG_DIGITS`] significant digits.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CanonValue {
    Null,
    Int(i64),
    Real(CanonFloat),
    Text(String),
    Blob(Vec<u8>),
}

/// f64 wrapper with total ordering; NaN equals NaN.
#[derive(Debug, Clone, Copy)]
pub struct CanonFloat(pub f64);

impl PartialEq for CanonFloat {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0) == Ordering::Equal
    }
}
impl Eq for CanonFloat {}
impl PartialOrd for CanonFloat {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for CanonFloat {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}
impl std::hash::Hash for CanonFloat {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

impl CanonValue {
    pub fn python_repr(&self) -> String {
        match self {
            CanonValue::Null => "None".into(),
            CanonValue::Int(i) => i.to_string(),
            CanonValue::Real(f) => python_float(f.0),
            CanonValue::Text(t) => python_str_repr(t),
            CanonValue::Blob(b) => format!("b'<{} bytes>'", b.len()),
        }
    }

    /// Stable byte encoding used for hashing result signatures.
    pub fn write_signature(&self, out: &mut String) {
        match self {
            CanonValue::Null => out.push('N'),
            CanonValue::Int(i) => {
                let _ = write!(out, "I{i}");
            }
            CanonValue::Real(f) => {
                let _ = write!(out, "R{:016x}", f.0.to_bits());
            }
            CanonValue::Text(t) => {
                let _ = write!(out, "T{}:{}", t.len(), t);
            }
            CanonValue::Blob(b) => {
                let _ = write!(out, "B{}:", b.len());
                for byte in b {
                    let _ = write!(out, "{byte:02x}");
                }
            }
        }
    }
}

/// Shortest round-trip float text with Python's conventions (`1070.0`,
/// `1e+20`, `nan`, `inf`).
pub fn python_float(f: f64) -> String {
    if f.is_nan() {
        return "nan".into();
    }
    if f.is_infinite() {
        return if f > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let abs = f.abs();
    if abs != 0.0 && !(1e-4..1e16).contains(&abs) {
        // Python switches to exponent notation outside [1e-4, 1e16).
        let s = format!("{f:e}");
        let (mantissa, exp) = s.split_once('e').unwrap_or((&s, "0"));
        let exp: i32 = exp.parse().unwrap_or(0);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let s = format!("{f}");
    if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

/// Python `repr` of a str.
pub fn python_str_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') {
        '"'
    } else {
        '\''
    };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c if (c as u32) < 0x20 || c as u32 == 0x7f => {
                let _ = write!(out, "\\x{:02x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

/// Python repr of a row tuple: `('a',)`, `(1, 'b')`.
pub fn python_tuple<'a, I>(values: I) -> String
where
    I: IntoIterator<Item = String>,
    I::IntoIter: 'a,
{
    let items: Vec<String> = values.into_iter().collect();
    if items.len() == 1 {
        format!("({},)", items[0])
    } else {
        format!("({})", items.join(", "))
    }
}
