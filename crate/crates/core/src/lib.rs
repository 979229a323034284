//! Pre-action authorization for AI agent tool calls: signed agent passports,
//! declarative policy packs, a deterministic decision engine, and a
//! hash-chained audit log.

pub mod audit;
pub mod canon;
pub mod clock;
pub mod crypt;
pub mod engine;
pub mod fixtures;
pub mod model;
pub mod policy;
pub mod simharness;

pub use audit::{AuditEntry, AuditLog, AuditStore, FileStore, MemoryStore};
pub use canon::{canonicalize, CanonicalBytes, SourceKind, Value};
pub use clock::{Clock, ManualClock, SystemClock, Timestamp};
pub use crypt::{Keyring, KeyringHandle, RegistryKey};
pub use engine::{explain, verify_decision, Authorization, Decision, Engine, EngineConfig, Verdict};
pub use model::{AssuranceLevel, Limits, Params, Passport, PassportStatus, ToolCall};
pub use policy::{LibraryHandle, PackLibrary, PolicyPack};
