//! Pre-action authorization: one signed decision and one audit entry per
//! tool call.

pub mod deny;
mod reason;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::{Arc, Mutex};

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;

use crate::audit::{AuditEntry, AuditLog, AuditRecord, OnStoreFailure};
use crate::canon::{self, SourceKind, Value};
use crate::clock::{format_timestamp, parse_timestamp, Clock, SystemClock, Timestamp};
use crate::crypt::{self, KeyringHandle, Keyring, Signature};
use crate::model::{assurance_at_least, ModelError, ParamValue, Passport, PassportStatus, ToolCall};
use crate::policy::{evaluate_rules, validate_context, LibraryHandle, RulesOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    Allow,
    Deny,
    Escalate,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Allow => "ALLOW",
            Verdict::Deny => "DENY",
            Verdict::Escalate => "ESCALATE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ALLOW" => Some(Verdict::Allow),
            "DENY" => Some(Verdict::Deny),
            "ESCALATE" => Some(Verdict::Escalate),
            _ => None,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub verdict: Verdict,
    pub deny_code: String,
    pub reason: String,
    pub decision_id: String,
    pub agent_id: String,
    pub capability_id: String,
    pub params_hash: String,
    pub decided_at: Timestamp,
    /// Set on ESCALATE: the id an out-of-band approver would act on.
    pub approval_id: Option<String>,
    pub fail_open: bool,
    pub key_id: String,
    pub signature: String,
}

impl Decision {
    /// Everything the signature covers.
    pub fn signed_body(&self) -> Value {
        let mut body = BTreeMap::from([
            ("decision".to_owned(), Value::from(self.verdict.as_str())),
            ("deny_code".to_owned(), Value::from(self.deny_code.as_str())),
            ("reason".to_owned(), Value::from(self.reason.as_str())),
            ("decision_id".to_owned(), Value::from(self.decision_id.as_str())),
            ("agent_id".to_owned(), Value::from(self.agent_id.as_str())),
            ("capability_id".to_owned(), Value::from(self.capability_id.as_str())),
            ("params_hash".to_owned(), Value::from(self.params_hash.as_str())),
            ("decided_at".to_owned(), Value::from(format_timestamp(&self.decided_at))),
            ("fail_open".to_owned(), Value::from(self.fail_open)),
            ("key_id".to_owned(), Value::from(self.key_id.as_str())),
        ]);
        if let Some(id) = &self.approval_id {
            body.insert("approval_id".into(), Value::from(id.as_str()));
        }
        Value::Object(body)
    }

    pub fn signed_bytes(&self) -> canon::CanonicalBytes {
        canon::canonicalize(&self.signed_body(), SourceKind::Decision)
    }

    /// The full wire body: the signed body plus `signature`.
    pub fn to_value(&self) -> Value {
        let Value::Object(mut body) = self.signed_body() else { unreachable!() };
        body.insert("signature".into(), Value::from(self.signature.as_str()));
        Value::Object(body)
    }

    pub fn to_canonical_string(&self) -> String {
        self.to_value().to_canonical_string()
    }

    pub fn from_value(value: Value) -> Result<Self, ModelError> {
        let Value::Object(mut obj) = value else {
            return Err(ModelError::malformed("decision must be an object"));
        };
        let mut text = |name: &str| -> Result<String, ModelError> {
            match obj.remove(name) {
                Some(Value::String(s)) => Ok(s),
                _ => Err(ModelError::invariant(format!("decision.{name}"), "missing string")),
            }
        };
        let verdict_text = text("decision")?;
        let deny_code = text("deny_code")?;
        let reason = text("reason")?;
        let decision_id = text("decision_id")?;
        let agent_id = text("agent_id")?;
        let capability_id = text("capability_id")?;
        let params_hash = text("params_hash")?;
        let decided_at_text = text("decided_at")?;
        let key_id = text("key_id")?;
        let signature = text("signature")?;
        let approval_id = match obj.remove("approval_id") {
            Some(Value::String(s)) => Some(s),
            None => None,
            Some(_) => return Err(ModelError::invariant("decision.approval_id", "must be a string")),
        };
        let fail_open = obj
            .remove("fail_open")
            .and_then(|v| v.as_bool())
            .ok_or_else(|| ModelError::invariant("decision.fail_open", "missing boolean"))?;
        Ok(Decision {
            verdict: Verdict::parse(&verdict_text)
                .ok_or_else(|| ModelError::invariant("decision.decision", "unknown verdict"))?,
            deny_code,
            reason,
            decision_id,
            agent_id,
            capability_id,
            params_hash,
            decided_at: parse_timestamp(&decided_at_text)
                .ok_or_else(|| ModelError::invariant("decision.decided_at", "not a canonical timestamp"))?,
            approval_id,
            fail_open,
            key_id,
            signature,
        })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, ModelError> {
        Self::from_value(Value::parse(bytes)?)
    }
}

pub fn verify_decision(decision: &Decision, keyring: &Keyring) -> bool {
    let sig = Signature { value: decision.signature.clone(), key_id: decision.key_id.clone() };
    crypt::verify(&decision.signed_bytes(), &sig, keyring)
}

/// The structured response an agent framework sees.
pub fn explain(decision: &Decision) -> Value {
    Value::Object(BTreeMap::from([
        ("decision".to_owned(), Value::from(decision.verdict.as_str())),
        ("deny_code".to_owned(), Value::from(decision.deny_code.as_str())),
        ("reason".to_owned(), Value::from(decision.reason.as_str())),
        ("decision_id".to_owned(), Value::from(decision.decision_id.as_str())),
        ("signature".to_owned(), Value::from(decision.signature.as_str())),
    ]))
}

const ID_ALPHABET: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_";
pub const ID_TOKEN_LEN: usize = 24;

/// Source of the 24-character url-safe tokens in decision and approval ids.
pub trait DecisionIdSource: Send {
    fn next_token(&mut self) -> String;
}

fn token_from(rng: &mut impl Rng) -> String {
    (0..ID_TOKEN_LEN).map(|_| ID_ALPHABET[rng.random_range(0..64)] as char).collect()
}

#[derive(Debug, Default)]
pub struct RandomIds;

impl DecisionIdSource for RandomIds {
    fn next_token(&mut self) -> String {
        token_from(&mut rand::rng())
    }
}

/// Reproducible ids for tests and replays.
#[derive(Debug)]
pub struct SeededIds(ChaCha8Rng);

impl SeededIds {
    pub fn new(seed: u64) -> Self {
        SeededIds(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl DecisionIdSource for SeededIds {
    fn next_token(&mut self) -> String {
        token_from(&mut self.0)
    }
}

pub fn is_decision_id(s: &str) -> bool {
    s.strip_prefix("dec_")
        .is_some_and(|t| t.len() == ID_TOKEN_LEN && t.bytes().all(|b| ID_ALPHABET.contains(&b)))
}

pub const FAIL_OPEN_ENV: &str = "OAP_FAIL_OPEN";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineConfig {
    /// Converts pack-missing and registry-unreachable outcomes to ALLOW,
    /// flagged in the decision and its audit entry.
    pub fail_open: bool,
}

impl EngineConfig {
    /// `OAP_FAIL_OPEN=1` (or `true`) turns fail-open on.
    pub fn from_env() -> Self {
        let fail_open = std::env::var(FAIL_OPEN_ENV).is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true"));
        EngineConfig { fail_open }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("no active signing key: cannot produce a signed decision")]
    NoSigningKey,
}

/// Why the service could not hand the engine a passport.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Unresolved {
    UnknownAgent,
    InvalidPassport(String),
    RegistryUnavailable(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Authorization {
    pub decision: Decision,
    /// `None` only when the audit log could not even locate the agent's
    /// chain; the decision is then always a DENY.
    pub entry: Option<AuditEntry>,
}

const RATE_WINDOW_SECONDS: i64 = 60;

#[derive(Debug, Default)]
struct AgentUsage {
    /// Decision times, oldest first.
    window: VecDeque<Timestamp>,
    /// ALLOWed amounts per (currency, UTC day).
    daily: HashMap<(String, NaiveDate), Decimal>,
}

impl AgentUsage {
    fn calls_in_window(&mut self, now: Timestamp) -> usize {
        let start = now - Duration::seconds(RATE_WINDOW_SECONDS);
        self.window.retain(|t| *t > start);
        self.window.iter().filter(|t| **t <= now).count()
    }

    fn daily_total(&self, currency: &str, day: NaiveDate) -> Decimal {
        self.daily.get(&(currency.to_owned(), day)).copied().unwrap_or_default()
    }
}

struct Outcome {
    verdict: Verdict,
    code: &'static str,
    /// Pack rules may carry extension codes.
    code_owned: Option<String>,
    reason: String,
    fail_open: bool,
}

impl Outcome {
    fn deny(code: &'static str, reason: impl Into<String>) -> Self {
        Outcome { verdict: Verdict::Deny, code, code_owned: None, reason: reason.into(), fail_open: false }
    }

    fn code(&self) -> &str {
        self.code_owned.as_deref().unwrap_or(self.code)
    }
}

/// Charge to book against the daily cap if the call is allowed.
struct Charge {
    currency: String,
    day: NaiveDate,
    amount: Decimal,
}

pub struct Engine {
    keys: Arc<KeyringHandle>,
    library: Arc<LibraryHandle>,
    audit: Arc<AuditLog>,
    clock: Arc<dyn Clock>,
    ids: Mutex<Box<dyn DecisionIdSource>>,
    usage: Mutex<HashMap<String, Arc<Mutex<AgentUsage>>>>,
    config: EngineConfig,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(keys: Arc<KeyringHandle>, library: Arc<LibraryHandle>, audit: Arc<AuditLog>) -> Self {
        Engine {
            keys,
            library,
            audit,
            clock: Arc::new(SystemClock),
            ids: Mutex::new(Box::new(RandomIds)),
            usage: Mutex::new(HashMap::new()),
            config: EngineConfig::default(),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_ids(mut self, ids: Box<dyn DecisionIdSource>) -> Self {
        self.ids = Mutex::new(ids);
        self
    }

    pub fn with_config(mut self, config: EngineConfig) -> Self {
        self.config = config;
        self
    }

    pub fn config(&self) -> EngineConfig {
        self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn keys(&self) -> &Arc<KeyringHandle> {
        &self.keys
    }

    pub fn library(&self) -> &Arc<LibraryHandle> {
        &self.library
    }

    pub fn audit(&self) -> &Arc<AuditLog> {
        &self.audit
    }

    /// Forgets all rate-window and daily-cap state.
    pub fn reset_usage(&self) {
        self.usage.lock().unwrap().clear();
    }

    /// Sum of ALLOWed amounts for an agent, currency and UTC day.
    pub fn daily_total(&self, agent_id: &str, currency: &str, day: NaiveDate) -> Decimal {
        let usage = self.usage.lock().unwrap().get(agent_id).cloned();
        usage.map(|u| u.lock().unwrap().daily_total(currency, day)).unwrap_or_default()
    }

    fn agent_usage(&self, agent_id: &str) -> Arc<Mutex<AgentUsage>> {
        Arc::clone(self.usage.lock().unwrap().entry(agent_id.to_owned()).or_default())
    }

    pub fn authorize(&self, call: &ToolCall, passport: &Passport) -> Result<Authorization, EngineError> {
        self.authorize_at(call, passport, self.clock.now())
    }

    /// Algorithm 1 at an explicit time.
    pub fn authorize_at(&self, call: &ToolCall, passport: &Passport, now: Timestamp) -> Result<Authorization, EngineError> {
        let ring = self.keys.snapshot();
        if !crypt::verify_passport(passport, &ring) {
            return self.finish(call, now, Outcome::deny(deny::FAIL_CLOSED, "Passport signature verification failed"), None, None);
        }
        if passport.agent_id != call.agent_id {
            return self.finish(
                call,
                now,
                Outcome::deny(deny::FAIL_CLOSED, "Passport does not belong to the requesting agent"),
                None,
                None,
            );
        }

        // Decision, usage update and audit append are atomic per agent.
        let usage = self.agent_usage(&call.agent_id);
        let mut usage = usage.lock().unwrap();
        let (outcome, charge) = self.evaluate(call, passport, now, &mut usage);
        usage.window.push_back(now);
        self.finish(call, now, outcome, charge, Some(&mut usage))
    }

    fn evaluate(&self, call: &ToolCall, passport: &Passport, now: Timestamp, usage: &mut AgentUsage) -> (Outcome, Option<Charge>) {
        match passport.status {
            PassportStatus::Active => {}
            PassportStatus::Suspended => return (Outcome::deny(deny::PASSPORT_SUSPENDED, "Passport is suspended"), None),
            PassportStatus::Revoked => return (Outcome::deny(deny::PASSPORT_REVOKED, "Passport is revoked"), None),
        }
        if passport.is_expired_at(&now) {
            let when = passport.expires_at.as_ref().map(format_timestamp).unwrap_or_default();
            return (Outcome::deny(deny::PASSPORT_EXPIRED, format!("Passport expired at {when}")), None);
        }
        if !passport.has_capability(&call.capability_id) {
            return (
                Outcome::deny(
                    deny::UNKNOWN_CAPABILITY,
                    format!("Capability {} is not granted to this agent", call.capability_id),
                ),
                None,
            );
        }

        let library = self.library.snapshot();
        let Some(pack) = library.get(&call.capability_id) else {
            if self.config.fail_open {
                let reason = format!("No policy pack for {}; allowed by fail-open override", call.capability_id);
                return (
                    Outcome { verdict: Verdict::Allow, code: deny::ALLOWED, code_owned: None, reason, fail_open: true },
                    None,
                );
            }
            return (
                Outcome::deny(deny::FAIL_CLOSED, format!("No policy pack is bound to {}", call.capability_id)),
                None,
            );
        };

        if !assurance_at_least(passport.assurance_level, pack.min_assurance) {
            return (
                Outcome::deny(
                    deny::ASSURANCE_INSUFFICIENT,
                    format!(
                        "{} requires assurance {} or higher; passport has {}",
                        pack.policy_id,
                        pack.min_assurance.as_str(),
                        passport.assurance_level.as_str()
                    ),
                ),
                None,
            );
        }
        if let Err(violation) = validate_context(pack, &call.params) {
            return (Outcome::deny(deny::EVALUATION_ERROR, format!("Invalid context: {violation}")), None);
        }

        let limits = &passport.limits;
        match evaluate_rules(pack, &call.params, limits).0 {
            RulesOutcome::Clear => {}
            RulesOutcome::Denied { index } => {
                let reason = reason::for_rule(pack, index, &call.capability_id, &call.params, limits);
                let code = pack.rules[index].deny_code.clone();
                return (
                    Outcome { verdict: Verdict::Deny, code: "", code_owned: Some(code), reason, fail_open: false },
                    None,
                );
            }
            RulesOutcome::Fault { index, fault } => {
                return (
                    Outcome::deny(
                        deny::EVALUATION_ERROR,
                        format!("Rule #{} of {} could not be evaluated: {}", index + 1, pack.policy_id, fault.0),
                    ),
                    None,
                );
            }
        }

        if let Some(max) = limits.max_calls_per_minute {
            if usage.calls_in_window(now) >= max as usize {
                return (Outcome::deny(deny::RATE_LIMITED, "Call rate limit reached; retry later"), None);
            }
        }

        let charge = match (call.param("amount"), call.param("currency")) {
            (Some(ParamValue::Number(amount)), Some(ParamValue::String(currency))) => {
                Some(Charge { currency: currency.clone(), day: now.date_naive(), amount: *amount })
            }
            _ => None,
        };
        if let Some(c) = &charge {
            if let Some(cap) = limits.currency_limit(&c.currency).and_then(|l| l.daily_cap) {
                if usage.daily_total(&c.currency, c.day) + c.amount > cap {
                    return (
                        Outcome::deny(
                            deny::DAILY_CAP_EXCEEDED,
                            format!("Daily {} cap would be exceeded by this call", c.currency),
                        ),
                        None,
                    );
                }
            }
        }

        if limits.approval_required() {
            return (
                Outcome {
                    verdict: Verdict::Escalate,
                    code: deny::APPROVAL_REQUIRED,
                    code_owned: None,
                    reason: "Human approval is required before this call can proceed".into(),
                    fail_open: false,
                },
                None,
            );
        }

        (
            Outcome { verdict: Verdict::Allow, code: deny::ALLOWED, code_owned: None, reason: "Authorized".into(), fail_open: false },
            charge,
        )
    }

    /// Decides for a call whose passport could not be obtained.
    pub fn decide_unresolved(&self, call: &ToolCall, cause: &Unresolved) -> Result<Authorization, EngineError> {
        let now = self.clock.now();
        let outcome = match cause {
            Unresolved::UnknownAgent => Outcome::deny(deny::FAIL_CLOSED, "No passport is registered for this agent"),
            Unresolved::InvalidPassport(why) => Outcome::deny(deny::FAIL_CLOSED, format!("Passport is invalid: {why}")),
            Unresolved::RegistryUnavailable(_) if self.config.fail_open => Outcome {
                verdict: Verdict::Allow,
                code: deny::ALLOWED,
                code_owned: None,
                reason: "Registry unreachable; allowed by fail-open override".into(),
                fail_open: true,
            },
            Unresolved::RegistryUnavailable(_) => Outcome::deny(deny::FAIL_CLOSED, "Passport registry is unreachable"),
        };
        self.finish(call, now, outcome, None, None)
    }

    fn sign(&self, call: &ToolCall, now: Timestamp, outcome: &Outcome) -> Result<Decision, EngineError> {
        let (decision_id, approval_id) = {
            let mut ids = self.ids.lock().unwrap();
            let decision_id = format!("dec_{}", ids.next_token());
            let approval_id = (outcome.verdict == Verdict::Escalate).then(|| format!("apr_{}", ids.next_token()));
            (decision_id, approval_id)
        };
        let ring = self.keys.snapshot();
        let key = ring.active_signer().ok_or(EngineError::NoSigningKey)?;
        let mut decision = Decision {
            verdict: outcome.verdict,
            deny_code: outcome.code().to_owned(),
            reason: outcome.reason.clone(),
            decision_id,
            agent_id: call.agent_id.clone(),
            capability_id: call.capability_id.clone(),
            params_hash: call.params_hash(),
            decided_at: now,
            approval_id,
            fail_open: outcome.fail_open,
            key_id: key.key_id.clone(),
            signature: String::new(),
        };
        decision.signature = crypt::sign(&decision.signed_bytes(), key).map_err(|_| EngineError::NoSigningKey)?.value;
        Ok(decision)
    }

    /// Signs, audits, and books usage. If the audit store refuses the entry
    /// and fail-open is off, the decision becomes a fail-closed DENY.
    fn finish(
        &self,
        call: &ToolCall,
        now: Timestamp,
        outcome: Outcome,
        charge: Option<Charge>,
        usage: Option<&mut AgentUsage>,
    ) -> Result<Authorization, EngineError> {
        let decision = self.sign(call, now, &outcome)?;
        let on_failure = if self.config.fail_open { OnStoreFailure::Buffer } else { OnStoreFailure::Reject };
        match self.audit.append(AuditRecord::from(&decision), on_failure) {
            Ok(entry) => {
                if let (Some(usage), Some(c), Verdict::Allow) = (usage, charge, decision.verdict) {
                    *usage.daily.entry((c.currency, c.day)).or_default() += c.amount;
                }
                Ok(Authorization { decision, entry: Some(entry) })
            }
            Err(_) => {
                let denial = self.sign(call, now, &Outcome::deny(deny::FAIL_CLOSED, "Audit log is unavailable"))?;
                let entry = self.audit.append(AuditRecord::from(&denial), OnStoreFailure::Buffer).ok();
                Ok(Authorization { decision: denial, entry })
            }
        }
    }
}
