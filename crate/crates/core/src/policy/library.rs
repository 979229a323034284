//! Capability → pack bindings, loaded from a directory with a manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::Deserialize;

use super::{parse_pack, PolicyError, PolicyPack};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct ManifestEntry {
    pub capability_id: String,
    pub file: String,
}

#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("capability `{capability_id}` is bound more than once")]
    DuplicateBinding { capability_id: String },
    #[error("{} pack(s) failed to load: {}", .0.len(), describe(.0))]
    Packs(Vec<(String, PolicyError)>),
}

fn describe(errors: &[(String, PolicyError)]) -> String {
    errors.iter().map(|(file, e)| format!("{file}: {e}")).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Default)]
pub struct PackLibrary {
    packs: BTreeMap<String, Arc<PolicyPack>>,
}

const BUNDLED: [(&str, &str); 6] = [
    ("finance.payment.refund", include_str!("../../packs/finance.payment.refund.v1.json")),
    ("payments.charge", include_str!("../../packs/payments.charge.v1.json")),
    ("data.file.read", include_str!("../../packs/data.file.read.v1.json")),
    ("web.fetch", include_str!("../../packs/web.fetch.v1.json")),
    ("system.command.execute", include_str!("../../packs/system.command.execute.v1.json")),
    ("messaging.send", include_str!("../../packs/messaging.send.v1.json")),
];

impl PackLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    /// The packs compiled into this crate.
    pub fn bundled() -> Self {
        let mut lib = PackLibrary::new();
        for (capability, text) in BUNDLED {
            let pack = parse_pack(text.as_bytes()).expect("bundled pack parses");
            lib.bind(capability, pack).expect("bundled bindings are unique");
        }
        lib
    }

    pub fn bind(&mut self, capability_id: &str, pack: PolicyPack) -> Result<(), LibraryError> {
        if self.packs.contains_key(capability_id) {
            return Err(LibraryError::DuplicateBinding { capability_id: capability_id.to_owned() });
        }
        self.packs.insert(capability_id.to_owned(), Arc::new(pack));
        Ok(())
    }

    pub fn get(&self, capability_id: &str) -> Option<&Arc<PolicyPack>> {
        self.packs.get(capability_id)
    }

    pub fn len(&self) -> usize {
        self.packs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<PolicyPack>)> {
        self.packs.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Sorted, de-duplicated policy ids.
    pub fn policy_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.packs.values().map(|p| p.policy_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

fn read(path: &Path) -> Result<Vec<u8>, LibraryError> {
    fs::read(path).map_err(|e| LibraryError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, LibraryError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    serde_json::from_slice(&read(&path)?).map_err(|e| LibraryError::Manifest(e.to_string()))
}

/// Loads every pack named in `<dir>/manifest.json`. A directory without a
/// manifest is an empty library. Parse errors are collected across all files
/// before failing.
pub fn load_pack_library(dir: &Path) -> Result<PackLibrary, LibraryError> {
    if !dir.is_dir() {
        return Err(LibraryError::Io { path: dir.display().to_string(), message: "not a directory".into() });
    }
    let manifest = read_manifest(dir)?;
    let mut lib = PackLibrary::new();
    let mut failures = Vec::new();
    for entry in manifest {
        if lib.packs.contains_key(&entry.capability_id) {
            return Err(LibraryError::DuplicateBinding { capability_id: entry.capability_id });
        }
        match parse_pack(&read(&dir.join(&entry.file))?) {
            Ok(pack) => lib.bind(&entry.capability_id, pack)?,
            Err(e) => failures.push((entry.file, e)),
        }
    }
    if failures.is_empty() {
        Ok(lib)
    } else {
        Err(LibraryError::Packs(failures))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub severity: Severity,
    /// The pack's policy id, or its file name when it did not parse.
    pub policy_id: String,
    pub rule: Option<usize>,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let severity = match self.severity {
            Severity::Error => "ERROR",
            Severity::Warning => "WARNING",
        };
        match self.rule {
            Some(n) => write!(f, "{severity} {} rule#{n} {}", self.policy_id, self.message),
            None => write!(f, "{severity} {} rule#- {}", self.policy_id, self.message),
        }
    }
}

/// Checks every `*.json` pack in `dir` (and the manifest, if present)
/// without stopping at the first problem.
pub fn lint_pack_dir(dir: &Path) -> Result<Vec<Finding>, LibraryError> {
    let mut findings = Vec::new();
    let manifest = match read_manifest(dir) {
        Ok(m) => m,
        Err(e) => {
            findings.push(Finding {
                severity: Severity::Error,
                policy_id: MANIFEST_FILE.into(),
                rule: None,
                message: e.to_string(),
            });
            Vec::new()
        }
    };

    let mut files: Vec<String> = fs::read_dir(dir)
        .map_err(|e| LibraryError::Io { path: dir.display().to_string(), message: e.to_string() })?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|name| name.ends_with(".json") && name != MANIFEST_FILE)
        .collect();
    files.sort();

    let mut seen = BTreeMap::new();
    for entry in &manifest {
        if seen.insert(entry.capability_id.as_str(), ()).is_some() {
            findings.push(Finding {
                severity: Severity::Error,
                policy_id: MANIFEST_FILE.into(),
                rule: None,
                message: format!("capability `{}` is bound more than once", entry.capability_id),
            });
        }
        if !files.contains(&entry.file) {
            findings.push(Finding {
                severity: Severity::Error,
                policy_id: MANIFEST_FILE.into(),
                rule: None,
                message: format!("`{}` does not exist", entry.file),
            });
        }
    }

    for file in &files {
        let bytes = read(&dir.join(file))?;
        match parse_pack(&bytes) {
            Ok(pack) => {
                for w in &pack.warnings {
                    findings.push(Finding {
                        severity: Severity::Warning,
                        policy_id: pack.policy_id.clone(),
                        rule: w.rule,
                        message: w.message.clone(),
                    });
                }
                if !manifest.is_empty() && !manifest.iter().any(|m| &m.file == file) {
                    findings.push(Finding {
                        severity: Severity::Warning,
                        policy_id: pack.policy_id.clone(),
                        rule: None,
                        message: "not bound to any capability in the manifest".into(),
                    });
                }
            }
            Err(e) => findings.push(Finding {
                severity: Severity::Error,
                policy_id: file.clone(),
                rule: e.rule(),
                message: e.to_string(),
            }),
        }
    }
    Ok(findings)
}

/// Shared, atomically replaceable library. Readers keep the snapshot they
/// took even if a reload happens mid-evaluation.
#[derive(Debug)]
pub struct LibraryHandle {
    current: RwLock<Arc<PackLibrary>>,
}

impl LibraryHandle {
    pub fn new(lib: PackLibrary) -> Self {
        LibraryHandle { current: RwLock::new(Arc::new(lib)) }
    }

    pub fn snapshot(&self) -> Arc<PackLibrary> {
        Arc::clone(&self.current.read().unwrap())
    }

    pub fn replace(&self, lib: PackLibrary) {
        *self.current.write().unwrap() = Arc::new(lib);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn packs_dir() -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("packs")
    }

    #[test]
    fn bundled_matches_directory() {
        let bundled = PackLibrary::bundled();
        let loaded = load_pack_library(&packs_dir()).unwrap();
        assert_eq!(bundled.len(), 6);
        assert_eq!(bundled.policy_ids(), loaded.policy_ids());
        for (cap, pack) in bundled.iter() {
            assert_eq!(loaded.get(cap).unwrap().as_ref(), pack.as_ref());
        }
    }

    #[test]
    fn empty_directory_is_empty_library() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_pack_library(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_binding_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let charge = fs::read(packs_dir().join("payments.charge.v1.json")).unwrap();
        fs::write(dir.path().join("a.json"), &charge).unwrap();
        fs::write(dir.path().join("b.json"), &charge).unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"[{"capability_id":"payments.charge","file":"a.json"},
                {"capability_id":"payments.charge","file":"b.json"}]"#,
        )
        .unwrap();
        assert!(matches!(
            load_pack_library(dir.path()),
            Err(LibraryError::DuplicateBinding { capability_id }) if capability_id == "payments.charge"
        ));
        let findings = lint_pack_dir(dir.path()).unwrap();
        assert!(findings.iter().any(|f| f.severity == Severity::Error && f.message.contains("more than once")));
    }

    #[test]
    fn parse_errors_are_aggregated() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("bad1.json"), "{").unwrap();
        fs::write(dir.path().join("bad2.json"), r#"{"policy_id":"x"}"#).unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"[{"capability_id":"a.b","file":"bad1.json"},{"capability_id":"c.d","file":"bad2.json"}]"#,
        )
        .unwrap();
        match load_pack_library(dir.path()) {
            Err(LibraryError::Packs(errors)) => assert_eq!(errors.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lint_line_format() {
        let dir = tempfile::tempdir().unwrap();
        let refund = fs::read_to_string(packs_dir().join("finance.payment.refund.v1.json")).unwrap();
        fs::write(dir.path().join("r.json"), refund.replace("amount > limits.max_per_tx", "amount >> 5")).unwrap();
        let findings = lint_pack_dir(dir.path()).unwrap();
        assert_eq!(findings.len(), 1);
        let line = findings[0].to_string();
        assert!(line.starts_with("ERROR r.json rule#1 "), "{line}");
        assert!(lint_pack_dir(&packs_dir()).unwrap().is_empty());
    }

    #[test]
    fn snapshot_survives_replace() {
        let handle = LibraryHandle::new(PackLibrary::bundled());
        let before = handle.snapshot();
        handle.replace(PackLibrary::new());
        assert_eq!(before.len(), 6);
        assert!(handle.snapshot().is_empty());
    }
}
