//! Canonical JSON serialization and SHA-256 digests.
//!
//! Every hash and signature in the system is computed over the bytes produced
//! here, so two implementations agree on a digest iff they agree on this form:
//!
//! - object keys sorted by UTF-16 code unit
//! - no insignificant whitespace
//! - numbers are exact decimals written without exponent or trailing zeros,
//!   with `-0` written as `0`
//! - strings use the minimal JSON escape set (`\"`, `\\`, `\b`, `\f`, `\n`,
//!   `\r`, `\t`, and `\u00XX` for the remaining control characters)

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use base64::Engine as _;
use rust_decimal::Decimal;
use sha2::{Digest, Sha256};

/// Prefix carried by every digest string.
pub const SHA256_PREFIX: &str = "sha256:";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CanonError {
    #[error("malformed JSON: {0}")]
    Malformed(String),
    #[error("unrepresentable value: {0}")]
    Unrepresentable(String),
}

/// A JSON document restricted to what canonical form can express exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Null,
    Bool(bool),
    Number(Decimal),
    String(String),
    Array(Vec<Value>),
    Object(BTreeMap<String, Value>),
}

impl Value {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_decimal(&self) -> Option<Decimal> {
        match self {
            Value::Number(d) => Some(*d),
            _ => None,
        }
    }

    pub fn as_array(&self) -> Option<&[Value]> {
        match self {
            Value::Array(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_object(&self) -> Option<&BTreeMap<String, Value>> {
        match self {
            Value::Object(m) => Some(m),
            _ => None,
        }
    }

    pub fn into_object(self) -> Option<BTreeMap<String, Value>> {
        match self {
            Value::Object(m) => Some(m),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "boolean",
            Value::Number(_) => "number",
            Value::String(_) => "string",
            Value::Array(_) => "array",
            Value::Object(_) => "object",
        }
    }

    /// Rejects NaN and the infinities, which have no canonical form.
    pub fn from_f64(x: f64) -> Result<Value, CanonError> {
        if !x.is_finite() {
            return Err(CanonError::Unrepresentable(format!("non-finite number {x}")));
        }
        // Shortest round-trip text, then exact decimal parse.
        parse_decimal_exact(&format!("{x:?}")).map(Value::Number)
    }

    /// Converts a parsed `serde_json` document. Numbers are taken from their
    /// source text, so nothing is approximated on the way in.
    pub fn from_json(value: serde_json::Value) -> Result<Value, CanonError> {
        Ok(match value {
            serde_json::Value::Null => Value::Null,
            serde_json::Value::Bool(b) => Value::Bool(b),
            serde_json::Value::Number(n) => Value::Number(parse_decimal_exact(&n.to_string())?),
            serde_json::Value::String(s) => Value::String(s),
            serde_json::Value::Array(items) => Value::Array(
                items
                    .into_iter()
                    .map(Value::from_json)
                    .collect::<Result<_, _>>()?,
            ),
            serde_json::Value::Object(map) => Value::Object(
                map.into_iter()
                    .map(|(k, v)| Ok((k, Value::from_json(v)?)))
                    .collect::<Result<_, CanonError>>()?,
            ),
        })
    }

    /// Parses UTF-8 JSON text.
    pub fn parse(bytes: &[u8]) -> Result<Value, CanonError> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| CanonError::Unrepresentable(format!("non-UTF-8 input: {e}")))?;
        let json: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CanonError::Malformed(e.to_string()))?;
        Value::from_json(json)
    }

    /// Canonical text of this value.
    pub fn to_canonical_string(&self) -> String {
        let mut out = Vec::new();
        write_canonical(self, &mut out);
        String::from_utf8(out).expect("canonical writer emits UTF-8")
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_canonical_string())
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::String(s.to_owned())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::String(s)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Bool(b)
    }
}

impl From<Decimal> for Value {
    fn from(d: Decimal) -> Self {
        Value::Number(d)
    }
}

impl From<u64> for Value {
    fn from(n: u64) -> Self {
        Value::Number(Decimal::from(n))
    }
}

impl From<i64> for Value {
    fn from(n: i64) -> Self {
        Value::Number(Decimal::from(n))
    }
}

impl From<Vec<Value>> for Value {
    fn from(items: Vec<Value>) -> Self {
        Value::Array(items)
    }
}

impl From<BTreeMap<String, Value>> for Value {
    fn from(map: BTreeMap<String, Value>) -> Self {
        Value::Object(map)
    }
}

/// What a canonical byte string was produced from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceKind {
    Passport,
    Decision,
    AuditEntry,
    Params,
    Document,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanonicalBytes {
    bytes: Vec<u8>,
    kind: SourceKind,
}

impl CanonicalBytes {
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn kind(&self) -> SourceKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Wraps raw bytes that are already canonical, e.g. read back from a log segment.
    pub fn from_raw(bytes: Vec<u8>, kind: SourceKind) -> Self {
        CanonicalBytes { bytes, kind }
    }
}

pub fn canonicalize(value: &Value, kind: SourceKind) -> CanonicalBytes {
    let mut bytes = Vec::with_capacity(256);
    write_canonical(value, &mut bytes);
    CanonicalBytes { bytes, kind }
}

/// `sha256:` followed by the standard padded base64 of the digest.
pub fn hash(bytes: &CanonicalBytes) -> String {
    sha256_digest(bytes.as_bytes())
}

pub fn sha256_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    format!(
        "{SHA256_PREFIX}{}",
        base64::engine::general_purpose::STANDARD.encode(digest)
    )
}

/// Digest of the empty byte string; the genesis link of every audit chain.
pub fn empty_hash() -> String {
    sha256_digest(&[])
}

/// Shortest plain decimal text for `d`.
pub fn format_decimal(d: &Decimal) -> String {
    if d.is_zero() {
        return "0".to_owned();
    }
    d.normalize().to_string()
}

/// Parses a JSON number literal into an exact decimal, failing instead of
/// rounding when the value does not fit.
pub fn parse_decimal_exact(text: &str) -> Result<Decimal, CanonError> {
    let unrepresentable = || CanonError::Unrepresentable(format!("number {text} has no exact decimal form"));

    let (negative, rest) = match text.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, text),
    };
    let (mantissa_text, exponent) = match rest.find(['e', 'E']) {
        Some(i) => {
            let exp: i64 = rest[i + 1..]
                .parse()
                .map_err(|_| CanonError::Malformed(format!("bad exponent in {text}")))?;
            (&rest[..i], exp)
        }
        None => (rest, 0),
    };
    let (int_part, frac_part) = match mantissa_text.split_once('.') {
        Some((i, f)) => (i, f),
        None => (mantissa_text, ""),
    };
    if int_part.is_empty()
        || !int_part.bytes().all(|b| b.is_ascii_digit())
        || !frac_part.bytes().all(|b| b.is_ascii_digit())
        || (mantissa_text.contains('.') && frac_part.is_empty())
    {
        return Err(CanonError::Malformed(format!("invalid number {text}")));
    }

    let mut digits: String = format!("{int_part}{frac_part}");
    let mut exponent = exponent - frac_part.len() as i64;
    // Trailing zeros carry no value; fold them into the exponent.
    while digits.len() > 1 && digits.ends_with('0') {
        digits.pop();
        exponent += 1;
    }
    let digits = digits.trim_start_matches('0');
    if digits.is_empty() {
        return Ok(Decimal::ZERO);
    }
    if digits.len() > 29 {
        return Err(unrepresentable());
    }
    let mut mantissa = i128::from_str(digits).map_err(|_| unrepresentable())?;
    let scale = if exponent >= 0 {
        for _ in 0..exponent {
            mantissa = mantissa.checked_mul(10).ok_or_else(unrepresentable)?;
        }
        0u32
    } else {
        u32::try_from(-exponent).map_err(|_| unrepresentable())?
    };
    if negative {
        mantissa = -mantissa;
    }
    Decimal::try_from_i128_with_scale(mantissa, scale).map_err(|_| unrepresentable())
}

fn write_canonical(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(true) => out.extend_from_slice(b"true"),
        Value::Bool(false) => out.extend_from_slice(b"false"),
        Value::Number(d) => out.extend_from_slice(format_decimal(d).as_bytes()),
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(item, out);
            }
            out.push(b']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort_by(|a, b| a.encode_utf16().cmp(b.encode_utf16()));
            out.push(b'{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_string(key, out);
                out.push(b':');
                write_canonical(&map[key], out);
            }
            out.push(b'}');
        }
    }
}

fn write_string(s: &str, out: &mut Vec<u8>) {
    // serde_json's string escaping is exactly the minimal set.
    serde_json::to_writer(&mut *out, s).expect("writing to a Vec cannot fail");
}
