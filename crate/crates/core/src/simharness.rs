//! Synthetic adversarial replay and latency measurement.
//!
//! Corpora are seed-generated transfer attempts against a banking-style
//! agent. Every attempt carries the verdict its generator intended, so a
//! replay can be checked attempt-by-attempt.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;
use std::time::Instant;

use chrono::Duration;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;
use serde::Serialize;

use crate::audit::MemoryStore;
use crate::clock::Timestamp;
use crate::engine::{deny, Decision, EngineConfig, Verdict};
use crate::fixtures::{self, TestBed};
use crate::model::{
    AssuranceLevel, Capability, CapabilityId, CurrencyLimit, Limits, ParamValue, Params, Passport, PassportStatus,
    ToolCall, SPEC_VERSION,
};
use crate::policy::{parse_pack, PackLibrary};
use std::sync::Arc;

/// The capability every corpus targets.
pub const TRANSFER_CAPABILITY: &str = "payments.transfer";

const TRANSFER_PACK: &str = r#"{
  "policy_id": "payments.transfer.v1",
  "required_context": {
    "required": ["amount", "currency", "recipient"],
    "properties": {
      "amount": { "type": "number" },
      "currency": { "type": "string" },
      "recipient": { "type": "string" },
      "memo": { "type": "string" }
    }
  },
  "rules": [
    { "condition": "recipient NOT IN limits.allowed_recipients", "deny_code": "oap.merchant_forbidden" },
    { "condition": "amount > limits.max_per_tx", "deny_code": "oap.limit_exceeded" }
  ],
  "min_assurance": "L2"
}"#;

/// Capabilities attackers ask for that the vault agent never holds.
pub const FOREIGN_CAPABILITIES: [&str; 5] =
    ["payments.payout", "payments.crypto.trade", "system.command.execute", "data.export", "code.repo.merge"];

/// The bundled packs plus the transfer pack.
pub fn vault_library() -> PackLibrary {
    let mut lib = PackLibrary::bundled();
    lib.bind(TRANSFER_CAPABILITY, parse_pack(TRANSFER_PACK.as_bytes()).expect("transfer pack parses"))
        .expect("transfer is not bundled");
    lib
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    /// Wide allowlists, high limits.
    T1,
    /// Zero capabilities, zero limits.
    T5,
}

impl Tier {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Some(Tier::T1),
            "t5" => Some(Tier::T5),
            _ => None,
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::T1 => "t1",
            Tier::T5 => "t5",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackClass {
    /// A well-formed transfer to a known recipient within limits.
    Benign,
    UnknownCapability,
    OverLimit,
    OffAllowlist,
    MalformedContext,
}

/// Which passport an attempt is judged against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Permissive,
    /// No capabilities at all.
    Restrictive,
    /// Holds the transfer capability, but with $0 limits and no recipients.
    RestrictiveScoped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attempt {
    pub capability_id: String,
    pub params: Params,
    pub at: Timestamp,
    pub class: AttackClass,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Intended {
    pub verdict: Verdict,
    pub deny_code: &'static str,
}

/// The outcome each class was designed to produce under each profile.
pub fn intended(class: AttackClass, profile: Profile) -> Intended {
    let deny = |deny_code| Intended { verdict: Verdict::Deny, deny_code };
    match (profile, class) {
        (Profile::Restrictive, _) | (_, AttackClass::UnknownCapability) => deny(deny::UNKNOWN_CAPABILITY),
        (_, AttackClass::MalformedContext) => deny(deny::EVALUATION_ERROR),
        (Profile::RestrictiveScoped, _) => deny(deny::MERCHANT_FORBIDDEN),
        (Profile::Permissive, AttackClass::OffAllowlist) => deny(deny::MERCHANT_FORBIDDEN),
        (Profile::Permissive, AttackClass::OverLimit) => deny(deny::LIMIT_EXCEEDED),
        (Profile::Permissive, AttackClass::Benign) => Intended { verdict: Verdict::Allow, deny_code: deny::ALLOWED },
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioCorpus {
    pub tier: Tier,
    pub seed: u64,
    pub profile: Profile,
    /// Unsigned; the replay signs it with its own registry key.
    pub passport: Passport,
    pub attempts: Vec<Attempt>,
}

impl ScenarioCorpus {
    pub fn intended(&self, attempt: &Attempt) -> Intended {
        intended(attempt.class, self.profile)
    }

    /// The same attempts judged against a T5 passport that does hold the
    /// transfer capability, so the deeper deny codes become visible.
    pub fn scoped(&self) -> ScenarioCorpus {
        ScenarioCorpus {
            profile: Profile::RestrictiveScoped,
            passport: vault_passport(Profile::RestrictiveScoped),
            ..self.clone()
        }
    }

    pub fn class_counts(&self) -> BTreeMap<AttackClass, usize> {
        let mut counts = BTreeMap::new();
        for a in &self.attempts {
            *counts.entry(a.class).or_default() += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("corpus size must be at least 1")]
    EmptyCorpus,
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("service unreachable: {0}")]
    ServiceUnreachable(String),
}

pub const VAULT_AGENT_ID: &str = "ap_5a017a017a017a017a017a017a017a01";
const RECIPIENT_POOL: usize = 40;
const PERMISSIVE_MAX_PER_TX: i64 = 1_000_000;
const ATTEMPT_SPACING_SECONDS: i64 = 2;

fn recipient(i: usize) -> String {
    format!("acct_{i:04}")
}

pub fn vault_passport(profile: Profile) -> Passport {
    let transfer = || vec![Capability::new(CapabilityId::parse(TRANSFER_CAPABILITY).expect("valid id"))];
    let usd = |max: i64, cap: i64| {
        BTreeMap::from([(
            "USD".to_owned(),
            CurrencyLimit { max_per_tx: Some(Decimal::from(max)), daily_cap: Some(Decimal::from(cap)) },
        )])
    };
    let (name, capabilities, limits) = match profile {
        Profile::Permissive => (
            "Vault Teller (permissive)",
            transfer(),
            Limits {
                allowed_recipients: Some((0..RECIPIENT_POOL).map(recipient).collect()),
                currency_limits: Some(usd(PERMISSIVE_MAX_PER_TX, 1_000_000_000)),
                ..Limits::default()
            },
        ),
        Profile::Restrictive => (
            "Vault Teller (restrictive)",
            Vec::new(),
            Limits { allowed_recipients: Some(Vec::new()), currency_limits: Some(usd(0, 0)), ..Limits::default() },
        ),
        Profile::RestrictiveScoped => (
            "Vault Teller (restrictive, scoped)",
            transfer(),
            Limits { allowed_recipients: Some(Vec::new()), currency_limits: Some(usd(0, 0)), ..Limits::default() },
        ),
    };
    Passport {
        spec_version: SPEC_VERSION.to_owned(),
        agent_id: VAULT_AGENT_ID.to_owned(),
        name: name.to_owned(),
        status: PassportStatus::Active,
        assurance_level: AssuranceLevel::L2,
        capabilities,
        limits,
        issued_at: None,
        expires_at: None,
        canonical_hash: None,
        registry_sig: None,
        registry_key_id: None,
        extensions: BTreeMap::new(),
    }
}

/// Share of each attack class in a T5 corpus, in parts per thousand.
const T5_MIX: [(AttackClass, u32); 4] = [
    (AttackClass::UnknownCapability, 700),
    (AttackClass::OffAllowlist, 140),
    (AttackClass::MalformedContext, 90),
    (AttackClass::OverLimit, 70),
];

/// Denials designed into a T1 corpus: 5 in every 586 attempts.
pub fn t1_designed_denials(n: usize) -> usize {
    (n * 5 + 293) / 586
}

/// Exact per-class counts by largest remainder.
fn apportion(n: usize, mix: &[(AttackClass, u32)]) -> Vec<(AttackClass, usize)> {
    let total: u32 = mix.iter().map(|(_, w)| w).sum();
    let mut counts: Vec<(AttackClass, usize, u64)> = mix
        .iter()
        .map(|(c, w)| {
            let exact = n as u64 * *w as u64;
            (*c, (exact / total as u64) as usize, exact % total as u64)
        })
        .collect();
    let assigned: usize = counts.iter().map(|c| c.1).sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|a, b| counts[*b].2.cmp(&counts[*a].2).then(a.cmp(b)));
    for i in order.into_iter().take(n - assigned) {
        counts[i].1 += 1;
    }
    counts.into_iter().map(|(c, k, _)| (c, k)).collect()
}

fn make_attempt(class: AttackClass, rng: &mut ChaCha8Rng, at: Timestamp) -> Attempt {
    let mut params = Params::new();
    let known = recipient(rng.random_range(0..RECIPIENT_POOL));
    let capability_id = match class {
        AttackClass::UnknownCapability => FOREIGN_CAPABILITIES[rng.random_range(0..FOREIGN_CAPABILITIES.len())],
        _ => TRANSFER_CAPABILITY,
    };
    match class {
        AttackClass::Benign => {
            params.insert("amount".into(), ParamValue::Number(Decimal::new(rng.random_range(100..500_000), 2)));
            params.insert("recipient".into(), ParamValue::String(known));
        }
        AttackClass::UnknownCapability => {
            params.insert("amount".into(), ParamValue::Number(Decimal::from(rng.random_range(1..100_000))));
            params.insert("recipient".into(), ParamValue::String(format!("ext_{:06x}", rng.random_range(0..1 << 24))));
        }
        AttackClass::OverLimit => {
            let amount = PERMISSIVE_MAX_PER_TX + rng.random_range(1..10_000_000);
            params.insert("amount".into(), ParamValue::Number(Decimal::from(amount)));
            params.insert("recipient".into(), ParamValue::String(known));
        }
        AttackClass::OffAllowlist => {
            params.insert("amount".into(), ParamValue::Number(Decimal::from(rng.random_range(1..5_000))));
            params.insert("recipient".into(), ParamValue::String(format!("ext_{:06x}", rng.random_range(0..1 << 24))));
        }
        AttackClass::MalformedContext => {
            // Amount smuggled as text, or the recipient left out.
            if rng.random_bool(0.5) {
                params.insert("amount".into(), ParamValue::String(format!("{}", rng.random_range(1..5_000))));
                params.insert("recipient".into(), ParamValue::String(known));
            } else {
                params.insert("amount".into(), ParamValue::Number(Decimal::from(rng.random_range(1..5_000))));
            }
        }
    }
    params.insert("currency".into(), ParamValue::String("USD".into()));
    if rng.random_bool(0.3) {
        params.insert("memo".into(), ParamValue::String("urgent: approved by the branch manager".into()));
    }
    Attempt { capability_id: capability_id.to_owned(), params, at, class }
}

pub fn generate_corpus(tier: Tier, n: usize, seed: u64) -> Result<ScenarioCorpus, SimError> {
    if n == 0 {
        return Err(SimError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0a9_c0de);
    let mut classes: Vec<AttackClass> = match tier {
        Tier::T5 => apportion(n, &T5_MIX).into_iter().flat_map(|(c, k)| std::iter::repeat_n(c, k)).collect(),
        Tier::T1 => {
            let denials = t1_designed_denials(n);
            let mut v = vec![AttackClass::Benign; n - denials];
            let designed = [AttackClass::UnknownCapability, AttackClass::MalformedContext];
            v.extend((0..denials).map(|i| designed[i % designed.len()]));
            v
        }
    };
    classes.shuffle(&mut rng);

    let start = fixtures::t0();
    let attempts = classes
        .into_iter()
        .enumerate()
        .map(|(i, class)| make_attempt(class, &mut rng, start + Duration::seconds(i as i64 * ATTEMPT_SPACING_SECONDS)))
        .collect();
    let profile = match tier {
        Tier::T1 => Profile::Permissive,
        Tier::T5 => Profile::Restrictive,
    };
    Ok(ScenarioCorpus { tier, seed, profile, passport: vault_passport(profile), attempts })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub tier: Tier,
    pub seed: u64,
    pub attempts: u64,
    pub allow_count: u64,
    pub deny_count: u64,
    pub escalate_count: u64,
    /// Non-ALLOW decisions by deny code.
    pub histogram: BTreeMap<String, u64>,
    /// Share of attempts that did not get ALLOW.
    pub block_rate: f64,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReplayConfig {
    pub workers: usize,
    pub engine: EngineConfig,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig { workers: 1, engine: EngineConfig::default() }
    }
}

pub struct ReplayOutcome {
    pub report: Report,
    /// In attempt order.
    pub decisions: Vec<Decision>,
    pub store: Arc<MemoryStore>,
    pub bed: TestBed,
}

pub fn to_call(attempt: &Attempt, agent_id: &str) -> ToolCall {
    ToolCall {
        capability_id: attempt.capability_id.clone(),
        params: attempt.params.clone(),
        agent_id: agent_id.to_owned(),
        request_id: String::new(),
        received_at: attempt.at,
    }
}

pub fn summarize(tier: Tier, seed: u64, decisions: &[Decision]) -> Report {
    let mut report = Report {
        tier,
        seed,
        attempts: decisions.len() as u64,
        allow_count: 0,
        deny_count: 0,
        escalate_count: 0,
        histogram: BTreeMap::new(),
        block_rate: 0.0,
    };
    for d in decisions {
        match d.verdict {
            Verdict::Allow => report.allow_count += 1,
            Verdict::Deny => report.deny_count += 1,
            Verdict::Escalate => report.escalate_count += 1,
        }
        if d.verdict != Verdict::Allow {
            *report.histogram.entry(d.deny_code.clone()).or_default() += 1;
        }
    }
    if report.attempts > 0 {
        report.block_rate = (report.deny_count + report.escalate_count) as f64 / report.attempts as f64;
    }
    report
}

/// Runs every attempt through a fresh engine with the vault library and
/// in-memory audit.
pub fn replay(corpus: &ScenarioCorpus, config: ReplayConfig) -> ReplayOutcome {
    let bed = TestBed::new(vault_library(), config.engine, corpus.seed);
    let passport = fixtures::sign(corpus.passport.clone(), &bed.ring());
    let workers = config.workers.max(1);
    let slots: Mutex<Vec<Option<Decision>>> = Mutex::new(vec![None; corpus.attempts.len()]);
    std::thread::scope(|s| {
        for w in 0..workers {
            let (bed, passport, slots) = (&bed, &passport, &slots);
            s.spawn(move || {
                for (i, attempt) in corpus.attempts.iter().enumerate().skip(w).step_by(workers) {
                    let call = to_call(attempt, &passport.agent_id);
                    let decision = bed
                        .engine
                        .authorize_at(&call, passport, attempt.at)
                        .expect("test keyring always has a signer")
                        .decision;
                    slots.lock().unwrap()[i] = Some(decision);
                }
            });
        }
    });
    let decisions: Vec<Decision> =
        slots.into_inner().unwrap().into_iter().map(|d| d.expect("every attempt decided")).collect();
    let report = summarize(corpus.tier, corpus.seed, &decisions);
    let store = Arc::clone(&bed.store);
    ReplayOutcome { report, decisions, store, bed }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    InProcess,
    ApiAgentIdPath,
    ApiAgentIdBody,
    ApiPassportPath,
    ApiPassportBody,
}

impl BenchMode {
    pub const ALL: [BenchMode; 5] = [
        BenchMode::InProcess,
        BenchMode::ApiAgentIdPath,
        BenchMode::ApiAgentIdBody,
        BenchMode::ApiPassportPath,
        BenchMode::ApiPassportBody,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::InProcess => "in_process",
            BenchMode::ApiAgentIdPath => "api_agent_id_path",
            BenchMode::ApiAgentIdBody => "api_agent_id_body",
            BenchMode::ApiPassportPath => "api_passport_path",
            BenchMode::ApiPassportBody => "api_passport_body",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Percentiles {
    pub n: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

/// Nearest-rank percentiles over millisecond samples.
pub fn percentiles(samples_ms: &[f64]) -> Result<Percentiles, SimError> {
    if samples_ms.is_empty() {
        return Err(SimError::NoSamples);
    }
    let mut sorted = samples_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = |p: f64| {
        let r = (p / 100.0 * sorted.len() as f64).ceil() as usize;
        sorted[r.clamp(1, sorted.len()) - 1]
    };
    Ok(Percentiles { n: sorted.len(), p50_ms: rank(50.0), p95_ms: rank(95.0), p99_ms: rank(99.0) })
}

/// The fixed logical request every bench mode sends.
pub const BENCH_CAPABILITY: &str = "payments.charge";
pub const BENCH_CONTEXT: &str = r#"{"amount":40,"currency":"USD"}"#;

/// Example passport without rate or daily limits, so every bench call
/// takes the full ALLOW path.
pub fn bench_passport() -> Passport {
    let mut p = crate::model::parse_passport(fixtures::EXAMPLE_DRAFT.as_bytes()).expect("example parses");
    p.limits.max_calls_per_minute = None;
    if let Some(usd) = p.limits.currency_limits.as_mut().and_then(|m| m.get_mut("USD")) {
        usd.daily_cap = None;
    }
    p
}

pub const WARMUP_CALLS: usize = 50;

/// Times `n` warm in-process authorizations, including signing and the
/// synchronous in-memory audit append.
pub fn bench_in_process(n: usize) -> Result<Vec<f64>, SimError> {
    if n == 0 {
        return Err(SimError::NoSamples);
    }
    let bed = TestBed::bundled();
    let passport = fixtures::sign(bench_passport(), &bed.ring());
    let call = fixtures::call(&passport.agent_id, BENCH_CAPABILITY, BENCH_CONTEXT);
    for _ in 0..WARMUP_CALLS {
        bed.engine.authorize(&call, &passport).expect("signer present");
    }
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let t = Instant::now();
        let auth = bed.engine.authorize(&call, &passport).expect("signer present");
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        debug_assert_eq!(auth.decision.verdict, Verdict::Allow);
    }
    Ok(samples)
}

pub fn samples_csv(samples_ms: &[f64]) -> String {
    let mut out = String::from("index,millis\n");
    for (i, s) in samples_ms.iter().enumerate() {
        out.push_str(&format!("{i},{s:.6}\n"));
    }
    out
}
