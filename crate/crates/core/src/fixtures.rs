//! Deterministic keys, passports and engines for tests, benches and the
//! simulator. Nothing here is suitable for production keys.

use std::sync::Arc;

use crate::audit::{AuditLog, MemoryStore, WriteMode};
use crate::canon::Value;
use crate::clock::{parse_timestamp, ManualClock, Timestamp};
use crate::crypt::{self, key_id_for_label, Keyring, KeyringHandle, RegistryKey};
use crate::engine::{Engine, EngineConfig, SeededIds};
use crate::model::{parse_params, parse_passport, Passport, ToolCall};
use crate::policy::{LibraryHandle, PackLibrary};

pub const EXAMPLE_AGENT_ID: &str = "ap_117fff4550094005a6c48c8a626c95e4";

/// The example registry passport, unsigned.
pub const EXAMPLE_DRAFT: &str = include_str!("../testdata/canon/passport_body.json");

pub const TEST_KEY_LABEL: &str = "2025-01";

pub fn t0() -> Timestamp {
    parse_timestamp("2025-06-01T12:00:00Z").expect("valid")
}

/// A key derived from a fixed seed byte.
pub fn test_key(label: &str, seed: u8) -> RegistryKey {
    let key_id = key_id_for_label(label).expect("valid label");
    RegistryKey::from_seed(&key_id, [seed; 32], parse_timestamp("2025-01-01T00:00:00Z").expect("valid"))
}

pub fn test_keyring() -> Keyring {
    let mut ring = Keyring::new();
    ring.insert(test_key(TEST_KEY_LABEL, 1)).expect("fresh ring");
    ring
}

/// Signs `passport` with the ring's active key.
pub fn sign(mut passport: Passport, ring: &Keyring) -> Passport {
    crypt::sign_passport(&mut passport, ring.active_signer().expect("signer")).expect("signs");
    passport
}

pub fn example_passport(ring: &Keyring) -> Passport {
    sign(parse_passport(EXAMPLE_DRAFT.as_bytes()).expect("example parses"), ring)
}

pub fn call(agent_id: &str, capability_id: &str, context_json: &str) -> ToolCall {
    ToolCall {
        capability_id: capability_id.to_owned(),
        params: parse_params(Value::parse(context_json.as_bytes()).expect("context json")).expect("flat context"),
        agent_id: agent_id.to_owned(),
        request_id: String::new(),
        received_at: t0(),
    }
}

/// An engine over in-memory state with a manual clock and seeded ids.
pub struct TestBed {
    pub engine: Engine,
    pub store: Arc<MemoryStore>,
    pub clock: Arc<ManualClock>,
    pub keys: Arc<KeyringHandle>,
}

impl TestBed {
    pub fn new(library: PackLibrary, config: EngineConfig, seed: u64) -> Self {
        let keys = Arc::new(KeyringHandle::new(test_keyring()));
        let store = Arc::new(MemoryStore::new());
        let clock = Arc::new(ManualClock::new(t0()));
        let audit = Arc::new(AuditLog::new(store.clone(), keys.clone(), WriteMode::Sync));
        let engine = Engine::new(keys.clone(), Arc::new(LibraryHandle::new(library)), audit)
            .with_clock(clock.clone())
            .with_ids(Box::new(SeededIds::new(seed)))
            .with_config(config);
        TestBed { engine, store, clock, keys }
    }

    pub fn bundled() -> Self {
        Self::new(PackLibrary::bundled(), EngineConfig::default(), 0)
    }

    pub fn ring(&self) -> Arc<Keyring> {
        self.keys.snapshot()
    }
}
