//! Passports, capabilities, limits, assurance levels and tool calls.
//!
//! Everything here is immutable once parsed. Parsing checks structure and
//! invariants but never signatures; see [`crate::crypt::verify_passport`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rust_decimal::Decimal;

use crate::canon::{self, CanonError, CanonicalBytes, SourceKind, Value};
use crate::clock::{format_timestamp, parse_timestamp, Timestamp};

pub const SPEC_VERSION: &str = "oap/1.0";

/// Fields left out of the passport hash: the hash itself, the signature over
/// it, and the key id (so a key rotation can re-sign without a new hash).
pub const UNHASHED_PASSPORT_FIELDS: [&str; 3] = ["canonical_hash", "registry_sig", "registry_key_id"];

/// Unknown top-level passport fields with this prefix survive a round trip
/// but are not covered by the canonical hash.
pub const EXTENSION_PREFIX: &str = "x_";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("invariant violated on `{field}`: {message}")]
    InvariantViolation { field: String, message: String },
}

impl ModelError {
    pub(crate) fn invariant(field: impl Into<String>, message: impl Into<String>) -> Self {
        ModelError::InvariantViolation { field: field.into(), message: message.into() }
    }

    pub(crate) fn malformed(message: impl Into<String>) -> Self {
        ModelError::MalformedDocument(message.into())
    }
}

impl From<CanonError> for ModelError {
    fn from(e: CanonError) -> Self {
        ModelError::MalformedDocument(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Assurance levels
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AssuranceLevel {
    L0,
    L1,
    L2,
    L3,
    L4Kyc,
    L4Fin,
}

impl AssuranceLevel {
    pub const ALL: [AssuranceLevel; 6] = [
        AssuranceLevel::L0,
        AssuranceLevel::L1,
        AssuranceLevel::L2,
        AssuranceLevel::L3,
        AssuranceLevel::L4Kyc,
        AssuranceLevel::L4Fin,
    ];

    /// Both L4 variants share rank 4; neither dominates the other.
    pub fn rank(self) -> u8 {
        match self {
            AssuranceLevel::L0 => 0,
            AssuranceLevel::L1 => 1,
            AssuranceLevel::L2 => 2,
            AssuranceLevel::L3 => 3,
            AssuranceLevel::L4Kyc | AssuranceLevel::L4Fin => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AssuranceLevel::L0 => "L0",
            AssuranceLevel::L1 => "L1",
            AssuranceLevel::L2 => "L2",
            AssuranceLevel::L3 => "L3",
            AssuranceLevel::L4Kyc => "L4KYC",
            AssuranceLevel::L4Fin => "L4FIN",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        AssuranceLevel::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

impl fmt::Display for AssuranceLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `rank(have) >= rank(need)`.
pub fn assurance_at_least(have: AssuranceLevel, need: AssuranceLevel) -> bool {
    have.rank() >= need.rank()
}

// ---------------------------------------------------------------------------
// Capabilities
// ---------------------------------------------------------------------------

/// Dot-separated lowercase identifier with at least two segments, e.g. `payments.charge`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CapabilityId(String);

impl CapabilityId {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        if is_capability_id(s) {
            Ok(CapabilityId(s.to_owned()))
        } else {
            Err(ModelError::invariant(
                "capability_id",
                format!("`{s}` is not a dot-separated lowercase identifier"),
            ))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CapabilityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn is_capability_id(s: &str) -> bool {
    let mut segments = 0;
    for seg in s.split('.') {
        if seg.is_empty()
            || !seg
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
        {
            return false;
        }
        segments += 1;
    }
    segments >= 2
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Capability {
    pub id: CapabilityId,
    /// Any other keys on the capability object, carried through unchanged.
    pub extra: BTreeMap<String, Value>,
}

impl Capability {
    pub fn new(id: CapabilityId) -> Self {
        Capability { id, extra: BTreeMap::new() }
    }

    fn to_value(&self) -> Value {
        let mut map = self.extra.clone();
        map.insert("id".into(), self.id.as_str().into());
        Value::Object(map)
    }
}

// ---------------------------------------------------------------------------
// Limits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CurrencyLimit {
    pub max_per_tx: Option<Decimal>,
    pub daily_cap: Option<Decimal>,
}

/// Hostname allowlist entry: a literal host, or `*.` followed by a suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainPattern(String);

impl DomainPattern {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let stars = s.matches('*').count();
        let ok = !s.is_empty()
            && match stars {
                0 => true,
                1 => s.strip_prefix("*.").is_some_and(|rest| !rest.is_empty()),
                _ => false,
            };
        if ok {
            Ok(DomainPattern(s.to_owned()))
        } else {
            Err(ModelError::invariant(
                "limits.allowed_domains",
                format!("`{s}`: wildcard must be a single leading `*.` label"),
            ))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// `*.acme.internal` matches `a.acme.internal` and `a.b.acme.internal`
    /// but not `acme.internal` itself.
    pub fn matches(&self, host: &str) -> bool {
        let host = host.to_ascii_lowercase();
        match self.0.strip_prefix("*.") {
            Some(suffix) => {
                let suffix = suffix.to_ascii_lowercase();
                host.len() > suffix.len() + 1
                    && host.ends_with(&suffix)
                    && host.as_bytes()[host.len() - suffix.len() - 1] == b'.'
            }
            None => host == self.0.to_ascii_lowercase(),
        }
    }
}

/// A pack-specific limit value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LimitValue {
    Number(Decimal),
    String(String),
    Bool(bool),
    StringSet(Vec<String>),
}

impl LimitValue {
    fn from_value(field: &str, v: Value) -> Result<Self, ModelError> {
        Ok(match v {
            Value::Number(d) => LimitValue::Number(d),
            Value::String(s) => LimitValue::String(s),
            Value::Bool(b) => LimitValue::Bool(b),
            Value::Array(items) => LimitValue::StringSet(string_list(field, items)?),
            other => {
                return Err(ModelError::invariant(
                    field,
                    format!("limit values must be scalars or string lists, got {}", other.kind()),
                ))
            }
        })
    }

    fn to_value(&self) -> Value {
        match self {
            LimitValue::Number(d) => Value::Number(*d),
            LimitValue::String(s) => Value::String(s.clone()),
            LimitValue::Bool(b) => Value::Bool(*b),
            LimitValue::StringSet(items) => strings_value(items),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Limits {
    pub allowed_domains: Option<Vec<DomainPattern>>,
    pub allowed_recipients: Option<Vec<String>>,
    pub allowed_servers: Option<Vec<String>>,
    pub currency_limits: Option<BTreeMap<String, CurrencyLimit>>,
    pub allow_pii: Option<bool>,
    pub max_calls_per_minute: Option<u32>,
    pub approval_required: Option<bool>,
    pub extra: BTreeMap<String, LimitValue>,
}

impl Limits {
    pub fn currency_limit(&self, currency: &str) -> Option<&CurrencyLimit> {
        self.currency_limits.as_ref()?.get(currency)
    }

    pub fn approval_required(&self) -> bool {
        self.approval_required.unwrap_or(false)
    }

    pub fn from_value(value: Value) -> Result<Self, ModelError> {
        let mut obj = Fields::new("limits", value)?;
        let mut limits = Limits {
            allowed_domains: obj
                .opt_strings("allowed_domains")?
                .map(|items| items.iter().map(|s| DomainPattern::parse(s)).collect())
                .transpose()?,
            allowed_recipients: obj.opt_strings("allowed_recipients")?,
            allowed_servers: obj.opt_strings("allowed_servers")?,
            currency_limits: None,
            allow_pii: obj.opt_bool("allow_pii")?,
            max_calls_per_minute: None,
            approval_required: obj.opt_bool("approval_required")?,
            extra: BTreeMap::new(),
        };

        if let Some(v) = obj.take("max_calls_per_minute") {
            let n = v
                .as_decimal()
                .filter(|d| d.is_integer() && *d >= Decimal::ONE)
                .and_then(|d| u32::try_from(d).ok())
                .ok_or_else(|| {
                    ModelError::invariant("limits.max_calls_per_minute", "must be a positive integer")
                })?;
            limits.max_calls_per_minute = Some(n);
        }

        if let Some(v) = obj.take("currency_limits") {
            let entries = v
                .into_object()
                .ok_or_else(|| ModelError::malformed("limits.currency_limits must be an object"))?;
            let mut out = BTreeMap::new();
            for (code, entry) in entries {
                if !(code.len() == 3 && code.bytes().all(|b| b.is_ascii_uppercase())) {
                    return Err(ModelError::invariant(
                        "limits.currency_limits",
                        format!("`{code}` is not a 3-letter uppercase currency code"),
                    ));
                }
                out.insert(code.clone(), parse_currency_limit(&code, entry)?);
            }
            limits.currency_limits = Some(out);
        }

        for (key, v) in obj.rest() {
            let field = format!("limits.{key}");
            limits.extra.insert(key, LimitValue::from_value(&field, v)?);
        }
        Ok(limits)
    }

    pub fn to_value(&self) -> Value {
        let mut map: BTreeMap<String, Value> = self
            .extra
            .iter()
            .map(|(k, v)| (k.clone(), v.to_value()))
            .collect();
        if let Some(domains) = &self.allowed_domains {
            map.insert(
                "allowed_domains".into(),
                Value::Array(domains.iter().map(|d| d.as_str().into()).collect()),
            );
        }
        if let Some(r) = &self.allowed_recipients {
            map.insert("allowed_recipients".into(), strings_value(r));
        }
        if let Some(s) = &self.allowed_servers {
            map.insert("allowed_servers".into(), strings_value(s));
        }
        if let Some(cl) = &self.currency_limits {
            let entries = cl
                .iter()
                .map(|(code, limit)| {
                    let mut m = BTreeMap::new();
                    if let Some(x) = limit.max_per_tx {
                        m.insert("max_per_tx".to_owned(), Value::Number(x));
                    }
                    if let Some(x) = limit.daily_cap {
                        m.insert("daily_cap".to_owned(), Value::Number(x));
                    }
                    (code.clone(), Value::Object(m))
                })
                .collect();
            map.insert("currency_limits".into(), Value::Object(entries));
        }
        if let Some(b) = self.allow_pii {
            map.insert("allow_pii".into(), b.into());
        }
        if let Some(n) = self.max_calls_per_minute {
            map.insert("max_calls_per_minute".into(), u64::from(n).into());
        }
        if let Some(b) = self.approval_required {
            map.insert("approval_required".into(), b.into());
        }
        Value::Object(map)
    }
}

fn parse_currency_limit(code: &str, v: Value) -> Result<CurrencyLimit, ModelError> {
    let field = format!("limits.currency_limits.{code}");
    let mut obj = Fields::new(&field, v)?;
    let mut amount = |key: &str| -> Result<Option<Decimal>, ModelError> {
        match obj.take(key) {
            None => Ok(None),
            Some(Value::Number(d)) if d >= Decimal::ZERO => Ok(Some(d)),
            Some(_) => Err(ModelError::invariant(
                format!("{field}.{key}"),
                "must be a non-negative number",
            )),
        }
    };
    let limit = CurrencyLimit { max_per_tx: amount("max_per_tx")?, daily_cap: amount("daily_cap")? };
    if let Some((key, _)) = obj.rest().into_iter().next() {
        return Err(ModelError::invariant(field, format!("unknown field `{key}`")));
    }
    if let (Some(max), Some(cap)) = (limit.max_per_tx, limit.daily_cap) {
        if max > cap {
            return Err(ModelError::invariant(
                field,
                format!("max_per_tx ≤ daily_cap does not hold ({max} > {cap})"),
            ));
        }
    }
    Ok(limit)
}

// ---------------------------------------------------------------------------
// Passport
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PassportStatus {
    Active,
    Suspended,
    Revoked,
}

impl PassportStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            PassportStatus::Active => "active",
            PassportStatus::Suspended => "suspended",
            PassportStatus::Revoked => "revoked",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "active" => Some(PassportStatus::Active),
            "suspended" => Some(PassportStatus::Suspended),
            "revoked" => Some(PassportStatus::Revoked),
            _ => None,
        }
    }

    /// Revoked is terminal; suspension is reversible.
    pub fn can_transition_to(self, next: PassportStatus) -> bool {
        use PassportStatus::*;
        matches!(
            (self, next),
            (Active, Suspended) | (Suspended, Active) | (Active, Revoked) | (Suspended, Revoked)
        )
    }
}

impl fmt::Display for PassportStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passport {
    pub spec_version: String,
    pub agent_id: String,
    pub name: String,
    pub status: PassportStatus,
    pub assurance_level: AssuranceLevel,
    pub capabilities: Vec<Capability>,
    pub limits: Limits,
    pub issued_at: Option<Timestamp>,
    pub expires_at: Option<Timestamp>,
    pub canonical_hash: Option<String>,
    pub registry_sig: Option<String>,
    pub registry_key_id: Option<String>,
    /// Unrecognized top-level fields.
    pub extensions: BTreeMap<String, Value>,
}

pub fn parse_passport(document: &[u8]) -> Result<Passport, ModelError> {
    Passport::from_value(Value::parse(document)?)
}

impl Passport {
    pub fn from_value(value: Value) -> Result<Self, ModelError> {
        let mut obj = Fields::new("passport", value)?;

        let spec_version = obj.req_str("spec_version")?;
        if spec_version != SPEC_VERSION {
            return Err(ModelError::invariant(
                "spec_version",
                format!("expected `{SPEC_VERSION}`, got `{spec_version}`"),
            ));
        }
        let agent_id = obj.req_str("agent_id")?;
        if agent_id.is_empty() {
            return Err(ModelError::invariant("agent_id", "must not be empty"));
        }
        let name = obj.req_str("name")?;
        let status_text = obj.req_str("status")?;
        let status = PassportStatus::parse(&status_text).ok_or_else(|| {
            ModelError::invariant("status", format!("`{status_text}` is not one of active, suspended, revoked"))
        })?;
        let level_text = obj.req_str("assurance_level")?;
        let assurance_level = AssuranceLevel::parse(&level_text).ok_or_else(|| {
            ModelError::invariant("assurance_level", format!("`{level_text}` is not a known level"))
        })?;

        let raw_caps = obj
            .take("capabilities")
            .ok_or_else(|| ModelError::malformed("missing field `capabilities`"))?;
        let Value::Array(raw_caps) = raw_caps else {
            return Err(ModelError::malformed("`capabilities` must be an array"));
        };
        let mut capabilities = Vec::with_capacity(raw_caps.len());
        let mut seen = BTreeSet::new();
        for raw in raw_caps {
            let mut cap = Fields::new("capabilities[]", raw)?;
            let id = CapabilityId::parse(&cap.req_str("id")?).map_err(|e| match e {
                ModelError::InvariantViolation { message, .. } => ModelError::invariant("capabilities", message),
                other => other,
            })?;
            if !seen.insert(id.clone()) {
                return Err(ModelError::invariant("capabilities", format!("duplicate capability `{id}`")));
            }
            capabilities.push(Capability { id, extra: cap.rest() });
        }

        let limits = Limits::from_value(
            obj.take("limits")
                .ok_or_else(|| ModelError::malformed("missing field `limits`"))?,
        )?;

        let issued_at = obj.opt_timestamp("issued_at")?;
        let expires_at = obj.opt_timestamp("expires_at")?;
        if let (Some(issued), Some(expires)) = (issued_at, expires_at) {
            if expires <= issued {
                return Err(ModelError::invariant("expires_at", "must be strictly after issued_at"));
            }
        }

        let canonical_hash = obj.opt_str("canonical_hash")?;
        if let Some(h) = &canonical_hash {
            if !h.starts_with(canon::SHA256_PREFIX) {
                return Err(ModelError::invariant("canonical_hash", "must start with `sha256:`"));
            }
        }
        let registry_sig = obj.opt_str("registry_sig")?;
        if let Some(s) = &registry_sig {
            if !s.starts_with(crate::crypt::SIGNATURE_PREFIX) {
                return Err(ModelError::invariant("registry_sig", "must start with `ed25519:`"));
            }
        }
        let registry_key_id = obj.opt_str("registry_key_id")?;

        Ok(Passport {
            spec_version,
            agent_id,
            name,
            status,
            assurance_level,
            capabilities,
            limits,
            issued_at,
            expires_at,
            canonical_hash,
            registry_sig,
            registry_key_id,
            extensions: obj.rest(),
        })
    }

    /// Full document, including signature fields and all extensions.
    pub fn to_value(&self) -> Value {
        let Value::Object(mut map) = self.hash_body() else { unreachable!() };
        for (k, v) in &self.extensions {
            map.insert(k.clone(), v.clone());
        }
        if let Some(h) = &self.canonical_hash {
            map.insert("canonical_hash".into(), h.as_str().into());
        }
        if let Some(s) = &self.registry_sig {
            map.insert("registry_sig".into(), s.as_str().into());
        }
        if let Some(k) = &self.registry_key_id {
            map.insert("registry_key_id".into(), k.as_str().into());
        }
        Value::Object(map)
    }

    /// The region covered by `canonical_hash`.
    pub fn hash_body(&self) -> Value {
        let mut map: BTreeMap<String, Value> = self
            .extensions
            .iter()
            .filter(|(k, _)| !k.starts_with(EXTENSION_PREFIX))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        map.insert("spec_version".into(), self.spec_version.as_str().into());
        map.insert("agent_id".into(), self.agent_id.as_str().into());
        map.insert("name".into(), self.name.as_str().into());
        map.insert("status".into(), self.status.as_str().into());
        map.insert("assurance_level".into(), self.assurance_level.as_str().into());
        map.insert(
            "capabilities".into(),
            Value::Array(self.capabilities.iter().map(Capability::to_value).collect()),
        );
        map.insert("limits".into(), self.limits.to_value());
        if let Some(t) = &self.issued_at {
            map.insert("issued_at".into(), format_timestamp(t).into());
        }
        if let Some(t) = &self.expires_at {
            map.insert("expires_at".into(), format_timestamp(t).into());
        }
        Value::Object(map)
    }

    pub fn compute_hash(&self) -> String {
        canon::hash(&canon::canonicalize(&self.hash_body(), SourceKind::Passport))
    }

    pub fn serialize(&self) -> CanonicalBytes {
        canon::canonicalize(&self.to_value(), SourceKind::Passport)
    }

    pub fn has_capability(&self, capability_id: &str) -> bool {
        self.capabilities.iter().any(|c| c.id.as_str() == capability_id)
    }

    pub fn is_expired_at(&self, now: &Timestamp) -> bool {
        self.expires_at.is_some_and(|e| *now >= e)
    }

    /// Non-fatal findings.
    pub fn lint(&self) -> Vec<String> {
        let mut out = Vec::new();
        let well_formed_id = self
            .agent_id
            .strip_prefix("ap_")
            .is_some_and(|hex| hex.len() == 32 && hex.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()));
        if !well_formed_id {
            out.push(format!("agent_id `{}` is not `ap_` followed by 32 lowercase hex digits", self.agent_id));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Tool calls
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamValue {
    Number(Decimal),
    String(String),
    Bool(bool),
    StringList(Vec<String>),
}

impl ParamValue {
    pub fn to_value(&self) -> Value {
        match self {
            ParamValue::Number(d) => Value::Number(*d),
            ParamValue::String(s) => Value::String(s.clone()),
            ParamValue::Bool(b) => Value::Bool(*b),
            ParamValue::StringList(items) => strings_value(items),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ParamValue::Number(_) => "number",
            ParamValue::String(_) => "string",
            ParamValue::Bool(_) => "boolean",
            ParamValue::StringList(_) => "string_list",
        }
    }
}

impl From<&str> for ParamValue {
    fn from(s: &str) -> Self {
        ParamValue::String(s.to_owned())
    }
}

impl From<Decimal> for ParamValue {
    fn from(d: Decimal) -> Self {
        ParamValue::Number(d)
    }
}

impl From<i64> for ParamValue {
    fn from(n: i64) -> Self {
        ParamValue::Number(Decimal::from(n))
    }
}

impl From<bool> for ParamValue {
    fn from(b: bool) -> Self {
        ParamValue::Bool(b)
    }
}

pub type Params = BTreeMap<String, ParamValue>;

/// Flat params from a JSON object. Nested objects, nulls and non-string
/// array members are rejected.
pub fn parse_params(value: Value) -> Result<Params, ModelError> {
    let Value::Object(map) = value else {
        return Err(ModelError::malformed(format!("context must be an object, got {}", value.kind())));
    };
    let mut params = Params::new();
    for (key, v) in map {
        if key.is_empty() {
            return Err(ModelError::invariant("params", "field names must not be empty"));
        }
        let field = format!("params.{key}");
        let pv = match v {
            Value::Number(d) => ParamValue::Number(d),
            Value::String(s) => ParamValue::String(s),
            Value::Bool(b) => ParamValue::Bool(b),
            Value::Array(items) => ParamValue::StringList(string_list(&field, items)?),
            other => {
                return Err(ModelError::invariant(
                    field,
                    format!("values must be scalars or string lists, got {}", other.kind()),
                ))
            }
        };
        params.insert(key, pv);
    }
    Ok(params)
}

pub fn params_value(params: &Params) -> Value {
    Value::Object(params.iter().map(|(k, v)| (k.clone(), v.to_value())).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolCall {
    pub capability_id: String,
    pub params: Params,
    pub agent_id: String,
    pub request_id: String,
    pub received_at: Timestamp,
}

impl ToolCall {
    pub fn param(&self, name: &str) -> Option<&ParamValue> {
        self.params.get(name)
    }

    pub fn params_hash(&self) -> String {
        canon::hash(&canon::canonicalize(&params_value(&self.params), SourceKind::Params))
    }
}

// ---------------------------------------------------------------------------
// Parsing helpers
// ---------------------------------------------------------------------------

fn string_list(field: &str, items: Vec<Value>) -> Result<Vec<String>, ModelError> {
    items
        .into_iter()
        .map(|item| match item {
            Value::String(s) => Ok(s),
            other => Err(ModelError::invariant(
                field,
                format!("list members must be strings, got {}", other.kind()),
            )),
        })
        .collect()
}

fn strings_value(items: &[String]) -> Value {
    Value::Array(items.iter().map(|s| s.as_str().into()).collect())
}

/// Field-by-field consumption of a JSON object.
struct Fields {
    ctx: String,
    map: BTreeMap<String, Value>,
}

impl Fields {
    fn new(ctx: &str, value: Value) -> Result<Self, ModelError> {
        match value {
            Value::Object(map) => Ok(Fields { ctx: ctx.to_owned(), map }),
            other => Err(ModelError::malformed(format!("{ctx} must be an object, got {}", other.kind()))),
        }
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.map.remove(key)
    }

    fn rest(&mut self) -> BTreeMap<String, Value> {
        std::mem::take(&mut self.map)
    }

    fn req_str(&mut self, key: &str) -> Result<String, ModelError> {
        self.opt_str(key)?
            .ok_or_else(|| ModelError::malformed(format!("{}: missing field `{key}`", self.ctx)))
    }

    fn opt_str(&mut self, key: &str) -> Result<Option<String>, ModelError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(other) => Err(ModelError::malformed(format!(
                "{}: `{key}` must be a string, got {}",
                self.ctx,
                other.kind()
            ))),
        }
    }

    fn opt_bool(&mut self, key: &str) -> Result<Option<bool>, ModelError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Bool(b)) => Ok(Some(b)),
            Some(other) => Err(ModelError::malformed(format!(
                "{}: `{key}` must be a boolean, got {}",
                self.ctx,
                other.kind()
            ))),
        }
    }

    fn opt_strings(&mut self, key: &str) -> Result<Option<Vec<String>>, ModelError> {
        let field = format!("{}.{key}", self.ctx);
        match self.take(key) {
            None => Ok(None),
            Some(Value::Array(items)) => string_list(&field, items).map(Some),
            Some(other) => Err(ModelError::malformed(format!("{field} must be an array, got {}", other.kind()))),
        }
    }

    fn opt_timestamp(&mut self, key: &str) -> Result<Option<Timestamp>, ModelError> {
        match self.opt_str(key)? {
            None => Ok(None),
            Some(text) => parse_timestamp(&text).map(Some).ok_or_else(|| {
                ModelError::invariant(key, format!("`{text}` is not an RFC 3339 UTC timestamp with `Z` suffix"))
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) const EXAMPLE_PASSPORT: &str = r#"{
      "spec_version": "oap/1.0",
      "agent_id": "ap_117fff4550094005a6c48c8a626c95e4",
      "name": "Acme Research Agent",
      "status": "active",
      "assurance_level": "L2",
      "capabilities": [
        { "id": "web.fetch" },
        { "id": "data.file.read" },
        { "id": "payments.charge" }
      ],
      "limits": {
        "allowed_domains": ["api.github.com","*.acme.internal"],
        "currency_limits": {
          "USD": { "max_per_tx": 5000, "daily_cap": 25000 }
        },
        "allow_pii": false,
        "max_calls_per_minute": 60
      },
      "canonical_hash": "sha256:oOHPz1s/PrmLR7d8kZ...",
      "registry_sig": "ed25519:qf1LiELhoh7/xGRTJrZ...",
      "registry_key_id": "oap:registry:key-2025-01"
    }"#;

    fn with(doc: &str, from: &str, to: &str) -> String {
        assert!(doc.contains(from), "fixture edit target missing: {from}");
        doc.replacen(from, to, 1)
    }

    #[test]
    fn parses_example_passport() {
        let p = parse_passport(EXAMPLE_PASSPORT.as_bytes()).unwrap();
        assert_eq!(p.agent_id, "ap_117fff4550094005a6c48c8a626c95e4");
        assert_eq!(p.assurance_level, AssuranceLevel::L2);
        assert_eq!(p.capabilities.len(), 3);
        assert_eq!(p.limits.currency_limit("USD").unwrap().max_per_tx, Some(Decimal::from(5000)));
        assert_eq!(p.limits.max_calls_per_minute, Some(60));
        assert_eq!(p.registry_key_id.as_deref(), Some("oap:registry:key-2025-01"));
        assert!(p.lint().is_empty());
    }

    #[test]
    fn rejects_unknown_status() {
        let doc = with(EXAMPLE_PASSPORT, r#""status": "active""#, r#""status": "frozen""#);
        match parse_passport(doc.as_bytes()) {
            Err(ModelError::InvariantViolation { field, .. }) => assert_eq!(field, "status"),
            other => panic!("expected status violation, got {other:?}"),
        }
    }

    #[test]
    fn rejects_per_tx_above_daily_cap() {
        let doc = with(
            EXAMPLE_PASSPORT,
            r#""max_per_tx": 5000, "daily_cap": 25000"#,
            r#""max_per_tx": 100, "daily_cap": 50"#,
        );
        match parse_passport(doc.as_bytes()) {
            Err(ModelError::InvariantViolation { message, .. }) => {
                assert!(message.contains("max_per_tx ≤ daily_cap"), "{message}")
            }
            other => panic!("expected ordering violation, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_malformed() {
        let doc = with(EXAMPLE_PASSPORT, r#""name": "Acme Research Agent","#, "");
        assert!(matches!(parse_passport(doc.as_bytes()), Err(ModelError::MalformedDocument(_))));
        assert!(matches!(parse_passport(b"{not json"), Err(ModelError::MalformedDocument(_))));
    }

    #[test]
    fn structural_invariants() {
        let cases = [
            (r#""spec_version": "oap/1.0""#, r#""spec_version": "oap/2.0""#, "spec_version"),
            (r#"{ "id": "web.fetch" }"#, r#"{ "id": "Web.Fetch" }"#, "capabilities"),
            (r#"{ "id": "data.file.read" }"#, r#"{ "id": "web.fetch" }"#, "capabilities"),
            (r#""*.acme.internal""#, r#""api.*.internal""#, "limits.allowed_domains"),
            (r#""USD": {"#, r#""usd": {"#, "limits.currency_limits"),
            (r#""max_calls_per_minute": 60"#, r#""max_calls_per_minute": 0"#, "limits.max_calls_per_minute"),
            (r#""allow_pii": false"#, r#""nested": {"a": 1}"#, "limits.nested"),
        ];
        for (from, to, field) in cases {
            let doc = with(EXAMPLE_PASSPORT, from, to);
            match parse_passport(doc.as_bytes()) {
                Err(ModelError::InvariantViolation { field: f, .. }) => assert_eq!(f, field, "{to}"),
                other => panic!("{to}: expected violation on {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn expiry_must_follow_issuance() {
        let doc = with(
            EXAMPLE_PASSPORT,
            r#""status": "active","#,
            r#""status": "active", "issued_at": "2025-02-01T00:00:00Z", "expires_at": "2025-01-01T00:00:00Z","#,
        );
        assert!(matches!(
            parse_passport(doc.as_bytes()),
            Err(ModelError::InvariantViolation { field, .. }) if field == "expires_at"
        ));
    }

    #[test]
    fn odd_agent_id_is_only_a_lint() {
        let doc = with(EXAMPLE_PASSPORT, "ap_117fff4550094005a6c48c8a626c95e4", "agent-7");
        let p = parse_passport(doc.as_bytes()).unwrap();
        assert_eq!(p.lint().len(), 1);
    }

    #[test]
    fn extensions_round_trip_and_x_prefix_is_unhashed() {
        let base = parse_passport(EXAMPLE_PASSPORT.as_bytes()).unwrap();
        let doc = with(EXAMPLE_PASSPORT, r#""status": "active","#, r#""status": "active", "x_note": "hi", "team": "ops","#);
        let p = parse_passport(doc.as_bytes()).unwrap();
        assert_eq!(p.extensions.len(), 2);
        let reparsed = parse_passport(p.serialize().as_bytes()).unwrap();
        assert_eq!(reparsed, p);

        let mut only_x = p.clone();
        only_x.extensions.remove("team");
        assert_eq!(only_x.compute_hash(), base.compute_hash());
        assert_ne!(p.compute_hash(), base.compute_hash());
    }

    #[test]
    fn domain_patterns() {
        let wild = DomainPattern::parse("*.acme.internal").unwrap();
        assert!(wild.matches("api.acme.internal"));
        assert!(wild.matches("a.b.ACME.internal"));
        assert!(!wild.matches("acme.internal"));
        assert!(!wild.matches("evilacme.internal"));
        let lit = DomainPattern::parse("api.github.com").unwrap();
        assert!(lit.matches("api.github.com"));
        assert!(!lit.matches("x.api.github.com"));
        for bad in ["", "*", "*.", "**.a", "a.*", "*.*.a"] {
            assert!(DomainPattern::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn params_reject_nesting() {
        let ok = Value::parse(br#"{"amount": 40, "currency": "USD", "tags": ["a","b"], "ok": true}"#).unwrap();
        assert_eq!(parse_params(ok).unwrap().len(), 4);
        for bad in [r#"{"a": {"b": 1}}"#, r#"{"a": [1]}"#, r#"{"a": null}"#, r#"{"": 1}"#, "[1]"] {
            assert!(parse_params(Value::parse(bad.as_bytes()).unwrap()).is_err(), "{bad}");
        }
    }

    #[test]
    fn assurance_examples() {
        use AssuranceLevel::*;
        assert!(assurance_at_least(L2, L2));
        assert!(!assurance_at_least(L1, L2));
        assert!(assurance_at_least(L4Kyc, L4Fin));
        assert!(assurance_at_least(L4Fin, L4Kyc));
    }

    #[test]
    fn assurance_matches_rank_table_exhaustively() {
        // Independent rank table, written out by hand.
        let table = [("L0", 0), ("L1", 1), ("L2", 2), ("L3", 3), ("L4KYC", 4), ("L4FIN", 4)];
        for (have, hr) in table {
            for (need, nr) in table {
                let h = AssuranceLevel::parse(have).unwrap();
                let n = AssuranceLevel::parse(need).unwrap();
                assert_eq!(assurance_at_least(h, n), hr >= nr, "{have} vs {need}");
            }
        }
        // Total preorder: total and transitive.
        for a in AssuranceLevel::ALL {
            for b in AssuranceLevel::ALL {
                assert!(assurance_at_least(a, b) || assurance_at_least(b, a));
                for c in AssuranceLevel::ALL {
                    if assurance_at_least(a, b) && assurance_at_least(b, c) {
                        assert!(assurance_at_least(a, c));
                    }
                }
            }
        }
    }

    fn arb_decimal() -> impl Strategy<Value = Decimal> {
        (0i64..10_000_000, 0u32..3).prop_map(|(m, s)| Decimal::new(m, s))
    }

    prop_compose! {
        fn arb_passport()(
            hex in "[0-9a-f]{32}",
            name in "[A-Za-z ]{1,20}",
            status in prop::sample::select(vec![PassportStatus::Active, PassportStatus::Suspended, PassportStatus::Revoked]),
            level in prop::sample::select(AssuranceLevel::ALL.to_vec()),
            caps in prop::collection::btree_set("[a-z]{1,6}\\.[a-z]{1,6}", 0..5),
            recipients in prop::option::of(prop::collection::vec("[a-z0-9_]{1,8}", 0..4)),
            limit in prop::option::of((arb_decimal(), arb_decimal())),
            rate in prop::option::of(1u32..1000),
            approval in prop::option::of(any::<bool>()),
            supported in prop::option::of(prop::collection::vec("[A-Z]{3}", 0..3)),
        ) -> Passport {
            let mut limits = Limits {
                allowed_recipients: recipients,
                max_calls_per_minute: rate,
                approval_required: approval,
                ..Limits::default()
            };
            if let Some((a, b)) = limit {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                limits.currency_limits = Some(BTreeMap::from([(
                    "USD".to_owned(),
                    CurrencyLimit { max_per_tx: Some(lo), daily_cap: Some(hi) },
                )]));
            }
            if let Some(s) = supported {
                limits.extra.insert("supported".into(), LimitValue::StringSet(s));
            }
            Passport {
                spec_version: SPEC_VERSION.into(),
                agent_id: format!("ap_{hex}"),
                name,
                status,
                assurance_level: level,
                capabilities: caps.iter().map(|c| Capability::new(CapabilityId::parse(c).unwrap())).collect(),
                limits,
                issued_at: None,
                expires_at: None,
                canonical_hash: None,
                registry_sig: None,
                registry_key_id: None,
                extensions: BTreeMap::new(),
            }
        }
    }

    proptest! {
        #[test]
        fn passport_round_trips(p in arb_passport()) {
            let back = parse_passport(p.serialize().as_bytes()).unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn per_tx_cap_boundary(max in arb_decimal(), cap in arb_decimal()) {
            let doc = EXAMPLE_PASSPORT.replacen(
                r#""max_per_tx": 5000, "daily_cap": 25000"#,
                &format!(r#""max_per_tx": {max}, "daily_cap": {cap}"#),
                1,
            );
            let parsed = parse_passport(doc.as_bytes());
            prop_assert_eq!(parsed.is_ok(), max <= cap);
        }
    }
}
