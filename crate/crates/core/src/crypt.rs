//! Ed25519 registry keys, signing, and verification.
//!
//! Verification functions are total: anything that cannot be verified
//! (unknown key id, undecodable signature, wrong length) is simply `false`,
//! which the engine turns into a fail-closed DENY.

use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ed25519_dalek::pkcs8::{spki::der::pem::LineEnding, DecodePrivateKey, EncodePrivateKey};
use ed25519_dalek::{Signer, Verifier};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::canon::CanonicalBytes;
use crate::clock::{format_timestamp, parse_timestamp, Timestamp};
use crate::model::Passport;

pub const SIGNATURE_PREFIX: &str = "ed25519:";
pub const KEY_ID_PREFIX: &str = "oap:registry:key-";

#[derive(Debug, thiserror::Error)]
pub enum CryptError {
    #[error("key label `{0}` must be non-empty and use only [a-z0-9-]")]
    InvalidLabel(String),
    #[error("duplicate key id `{0}`")]
    DuplicateKeyId(String),
    #[error("key `{0}` is retired and cannot sign")]
    KeyRetired(String),
    #[error("private key for `{0}` is not available")]
    PrivateKeyUnavailable(String),
    #[error("no active signing key in keyring")]
    NoActiveKey,
    #[error("unknown key id `{0}`")]
    UnknownKey(String),
    #[error("keyring storage: {0}")]
    Storage(String),
}

/// An Ed25519 signature tagged with the key that made it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    /// `ed25519:` + base64 of the 64 signature bytes.
    pub value: String,
    pub key_id: String,
}

impl Signature {
    fn from_raw(sig: &ed25519_dalek::Signature, key_id: &str) -> Self {
        Signature {
            value: format!("{SIGNATURE_PREFIX}{}", B64.encode(sig.to_bytes())),
            key_id: key_id.to_owned(),
        }
    }

    pub fn decode(&self) -> Option<[u8; 64]> {
        let b64 = self.value.strip_prefix(SIGNATURE_PREFIX)?;
        B64.decode(b64).ok()?.try_into().ok()
    }
}

/// One registry key. The private half is present only where signing happens.
#[derive(Debug, Clone)]
pub struct RegistryKey {
    pub key_id: String,
    pub public_key: ed25519_dalek::VerifyingKey,
    private_key: Option<ed25519_dalek::SigningKey>,
    pub created_at: Timestamp,
    pub retired: bool,
}

impl RegistryKey {
    pub fn from_seed(key_id: &str, seed: [u8; 32], created_at: Timestamp) -> Self {
        let private_key = ed25519_dalek::SigningKey::from_bytes(&seed);
        RegistryKey {
            key_id: key_id.to_owned(),
            public_key: private_key.verifying_key(),
            private_key: Some(private_key),
            created_at,
            retired: false,
        }
    }

    pub fn public_only(key_id: &str, public_key: [u8; 32], created_at: Timestamp) -> Option<Self> {
        Some(RegistryKey {
            key_id: key_id.to_owned(),
            public_key: ed25519_dalek::VerifyingKey::from_bytes(&public_key).ok()?,
            private_key: None,
            created_at,
            retired: false,
        })
    }

    pub fn has_private_key(&self) -> bool {
        self.private_key.is_some()
    }

    pub fn public_key_b64(&self) -> String {
        B64.encode(self.public_key.as_bytes())
    }

    /// Same key without the private half.
    pub fn to_public(&self) -> RegistryKey {
        RegistryKey { private_key: None, ..self.clone() }
    }
}

pub fn key_id_for_label(label: &str) -> Result<String, CryptError> {
    let valid = !label.is_empty()
        && label
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-');
    if !valid {
        return Err(CryptError::InvalidLabel(label.to_owned()));
    }
    Ok(format!("{KEY_ID_PREFIX}{label}"))
}

#[derive(Debug, Clone, Default)]
pub struct Keyring {
    keys: Vec<RegistryKey>,
}

#[derive(Serialize, Deserialize)]
struct RingIndexEntry {
    key_id: String,
    public_key: String,
    created_at: String,
    retired: bool,
}

impl Keyring {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn keys(&self) -> &[RegistryKey] {
        &self.keys
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, key_id: &str) -> Option<&RegistryKey> {
        self.keys.iter().find(|k| k.key_id == key_id)
    }

    pub fn insert(&mut self, key: RegistryKey) -> Result<(), CryptError> {
        if self.get(&key.key_id).is_some() {
            return Err(CryptError::DuplicateKeyId(key.key_id));
        }
        self.keys.push(key);
        Ok(())
    }

    /// Creates `oap:registry:key-<label>` from fresh OS randomness.
    pub fn generate_key(&mut self, label: &str, now: Timestamp) -> Result<&RegistryKey, CryptError> {
        let key_id = key_id_for_label(label)?;
        if self.get(&key_id).is_some() {
            return Err(CryptError::DuplicateKeyId(key_id));
        }
        let mut seed = [0u8; 32];
        rand::rng().fill_bytes(&mut seed);
        self.keys.push(RegistryKey::from_seed(&key_id, seed, now));
        Ok(self.keys.last().expect("just pushed"))
    }

    pub fn retire(&mut self, key_id: &str) -> Result<(), CryptError> {
        let key = self
            .keys
            .iter_mut()
            .find(|k| k.key_id == key_id)
            .ok_or_else(|| CryptError::UnknownKey(key_id.to_owned()))?;
        key.retired = true;
        Ok(())
    }

    /// Newest non-retired key that holds a private half.
    pub fn active_signer(&self) -> Option<&RegistryKey> {
        self.keys
            .iter()
            .enumerate()
            .filter(|(_, k)| !k.retired && k.has_private_key())
            .max_by_key(|(i, k)| (k.created_at, *i))
            .map(|(_, k)| k)
    }

    /// Keyring with private halves stripped.
    pub fn public_view(&self) -> Keyring {
        Keyring { keys: self.keys.iter().map(RegistryKey::to_public).collect() }
    }

    /// Reads `ring.json` and the `<key_id>.pem` private keys next to it.
    /// A missing directory is an empty ring.
    pub fn load(dir: &Path) -> Result<Keyring, CryptError> {
        let index_path = dir.join("ring.json");
        if !index_path.exists() {
            return Ok(Keyring::new());
        }
        let storage = |e: &dyn std::fmt::Display| CryptError::Storage(format!("{}: {e}", index_path.display()));
        let text = fs::read_to_string(&index_path).map_err(|e| storage(&e))?;
        let index: Vec<RingIndexEntry> = serde_json::from_str(&text).map_err(|e| storage(&e))?;

        let mut ring = Keyring::new();
        for entry in index {
            let created_at = parse_timestamp(&entry.created_at)
                .ok_or_else(|| storage(&format!("bad created_at for {}", entry.key_id)))?;
            let public: [u8; 32] = B64
                .decode(&entry.public_key)
                .ok()
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| storage(&format!("bad public key for {}", entry.key_id)))?;
            let pem_path = dir.join(format!("{}.pem", entry.key_id));
            let mut key = if pem_path.exists() {
                let pem = fs::read_to_string(&pem_path).map_err(|e| storage(&e))?;
                let private = ed25519_dalek::SigningKey::from_pkcs8_pem(&pem).map_err(|e| storage(&e))?;
                if private.verifying_key().as_bytes() != &public {
                    return Err(storage(&format!("private key for {} does not match index", entry.key_id)));
                }
                RegistryKey::from_seed(&entry.key_id, private.to_bytes(), created_at)
            } else {
                RegistryKey::public_only(&entry.key_id, public, created_at)
                    .ok_or_else(|| storage(&format!("invalid public key for {}", entry.key_id)))?
            };
            key.retired = entry.retired;
            ring.insert(key)?;
        }
        Ok(ring)
    }

    /// Writes one PKCS#8 PEM per private key (mode 0600) plus `ring.json`.
    pub fn save(&self, dir: &Path) -> Result<(), CryptError> {
        let storage = |e: &dyn std::fmt::Display| CryptError::Storage(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(|e| storage(&e))?;
        for key in &self.keys {
            let Some(private) = &key.private_key else { continue };
            let path = dir.join(format!("{}.pem", key.key_id));
            if path.exists() {
                continue;
            }
            let pem = private.to_pkcs8_pem(LineEnding::LF).map_err(|e| storage(&e))?;
            write_private(&path, pem.as_bytes()).map_err(|e| storage(&e))?;
        }
        let index: Vec<RingIndexEntry> = self
            .keys
            .iter()
            .map(|k| RingIndexEntry {
                key_id: k.key_id.clone(),
                public_key: k.public_key_b64(),
                created_at: format_timestamp(&k.created_at),
                retired: k.retired,
            })
            .collect();
        let text = serde_json::to_string_pretty(&index).map_err(|e| storage(&e))?;
        fs::write(dir.join("ring.json"), text).map_err(|e| storage(&e))
    }
}

#[cfg(unix)]
fn write_private(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    use std::os::unix::fs::OpenOptionsExt;
    let mut f = fs::OpenOptions::new().write(true).create_new(true).mode(0o600).open(path)?;
    f.write_all(bytes)
}

#[cfg(not(unix))]
fn write_private(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    fs::write(path, bytes)
}

/// Shared keyring that can be swapped whole (rotation, reload) while
/// readers keep the ring they started with.
#[derive(Debug, Default)]
pub struct KeyringHandle {
    current: RwLock<Arc<Keyring>>,
}

impl KeyringHandle {
    pub fn new(ring: Keyring) -> Self {
        KeyringHandle { current: RwLock::new(Arc::new(ring)) }
    }

    pub fn snapshot(&self) -> Arc<Keyring> {
        Arc::clone(&self.current.read().unwrap())
    }

    pub fn replace(&self, ring: Keyring) {
        *self.current.write().unwrap() = Arc::new(ring);
    }
}

pub fn sign(payload: &CanonicalBytes, key: &RegistryKey) -> Result<Signature, CryptError> {
    sign_bytes(payload.as_bytes(), key)
}

pub fn sign_bytes(payload: &[u8], key: &RegistryKey) -> Result<Signature, CryptError> {
    if key.retired {
        return Err(CryptError::KeyRetired(key.key_id.clone()));
    }
    let private = key
        .private_key
        .as_ref()
        .ok_or_else(|| CryptError::PrivateKeyUnavailable(key.key_id.clone()))?;
    Ok(Signature::from_raw(&private.sign(payload), &key.key_id))
}

pub fn verify(payload: &CanonicalBytes, sig: &Signature, keyring: &Keyring) -> bool {
    verify_bytes(payload.as_bytes(), sig, keyring)
}

pub fn verify_bytes(payload: &[u8], sig: &Signature, keyring: &Keyring) -> bool {
    let Some(key) = keyring.get(&sig.key_id) else {
        return false;
    };
    let Some(raw) = sig.decode() else {
        return false;
    };
    key.public_key
        .verify(payload, &ed25519_dalek::Signature::from_bytes(&raw))
        .is_ok()
}

/// Fills `canonical_hash`, `registry_key_id` and `registry_sig`. The signature
/// covers the UTF-8 bytes of the `sha256:...` hash string.
pub fn sign_passport(passport: &mut Passport, key: &RegistryKey) -> Result<(), CryptError> {
    let hash = passport.compute_hash();
    let sig = sign_bytes(hash.as_bytes(), key)?;
    passport.canonical_hash = Some(hash);
    passport.registry_key_id = Some(sig.key_id);
    passport.registry_sig = Some(sig.value);
    Ok(())
}

pub fn verify_passport(passport: &Passport, keyring: &Keyring) -> bool {
    let (Some(claimed), Some(sig), Some(key_id)) = (
        &passport.canonical_hash,
        &passport.registry_sig,
        &passport.registry_key_id,
    ) else {
        return false;
    };
    if passport.compute_hash() != *claimed {
        return false;
    }
    let sig = Signature { value: sig.clone(), key_id: key_id.clone() };
    verify_bytes(claimed.as_bytes(), &sig, keyring)
}
