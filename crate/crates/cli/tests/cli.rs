use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use oap_core::fixtures::{self, TestBed, EXAMPLE_AGENT_ID, EXAMPLE_DRAFT};
use oap_core::model::parse_passport;
use oap_core::Clock;
use serde_json::{json, Value as Json};

fn oap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oap"))
        .current_dir(dir)
        .env_remove("OAP_FAIL_OPEN")
        .env_remove("OAP_KEYS")
        .env_remove("OAP_REGISTRY")
        .env_remove("OAP_AUDIT")
        .env_remove("OAP_PACKS")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A temp dir with one key and the example passport issued and registered.
fn workspace(draft: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    assert!(oap(dir.path(), &["keygen", "--label", "2025-01"]).status.success());
    std::fs::write(dir.path().join("draft.json"), draft).unwrap();
    let out = oap(dir.path(), &["passport", "issue", "--draft", "draft.json", "--out", "passport.json", "--register"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

fn decide(dir: &Path, capability: &str, context: &str) -> Output {
    oap(dir, &["decide", "--passport", "passport.json", "--capability", capability, "--context", context])
}

#[test]
fn keygen_prints_key_id_and_rejects_duplicates_and_bad_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out = oap(dir.path(), &["keygen", "--label", "2025-01"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "oap:registry:key-2025-01");

    assert_eq!(oap(dir.path(), &["keygen", "--label", "2025-01"]).status.code(), Some(2));
    assert_eq!(oap(dir.path(), &["keygen", "--label", "Bad_Label"]).status.code(), Some(2));

    let rotated = oap(dir.path(), &["keygen", "--label", "2025-02", "--rotate"]);
    assert!(rotated.status.success());
    assert_eq!(stdout(&rotated).trim(), "oap:registry:key-2025-02");
}

#[test]
fn issued_passport_verifies_and_one_byte_edit_fails() {
    let dir = workspace(EXAMPLE_DRAFT);
    let out = oap(dir.path(), &["passport", "verify", "passport.json"]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), format!("ok {EXAMPLE_AGENT_ID} active"));

    let text = std::fs::read_to_string(dir.path().join("passport.json")).unwrap();
    let edited = text.replacen("Acme Research Agent", "Acme Research Agenu", 1);
    assert_ne!(text, edited);
    std::fs::write(dir.path().join("edited.json"), edited).unwrap();
    assert_eq!(oap(dir.path(), &["passport", "verify", "edited.json"]).status.code(), Some(1));

    std::fs::write(dir.path().join("garbage.json"), "{not json").unwrap();
    assert_eq!(oap(dir.path(), &["passport", "verify", "garbage.json"]).status.code(), Some(1));
}

#[test]
fn issue_without_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("draft.json"), EXAMPLE_DRAFT).unwrap();
    assert_eq!(oap(dir.path(), &["passport", "issue", "--draft", "draft.json"]).status.code(), Some(2));
}

#[test]
fn status_transitions_follow_lifecycle() {
    let dir = workspace(EXAMPLE_DRAFT);
    let d = dir.path();
    assert!(oap(d, &["passport", "set-status", EXAMPLE_AGENT_ID, "suspended"]).status.success());
    assert!(oap(d, &["passport", "set-status", EXAMPLE_AGENT_ID, "active"]).status.success());
    let out = oap(d, &["passport", "set-status", EXAMPLE_AGENT_ID, "revoked"]);
    assert_eq!(stdout(&out).trim(), format!("{EXAMPLE_AGENT_ID} active -> revoked"));
    assert_eq!(oap(d, &["passport", "set-status", EXAMPLE_AGENT_ID, "active"]).status.code(), Some(2));
    assert_eq!(oap(d, &["passport", "set-status", "ap_nobody", "suspended"]).status.code(), Some(2));
    assert_eq!(oap(d, &["passport", "set-status", EXAMPLE_AGENT_ID, "paused"]).status.code(), Some(2));

    // The registry copy is re-signed on every change.
    let path = d.join("registry").join(format!("{EXAMPLE_AGENT_ID}.json"));
    assert!(oap(d, &["passport", "verify", path.to_str().unwrap()]).status.success());
}

#[test]
fn lint_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let packs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/packs");
    let out = oap(dir.path(), &["policy", "lint", packs.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));

    let bad = dir.path().join("bad");
    std::fs::create_dir(&bad).unwrap();
    let manifest = json!([{ "capability_id": "demo.widget.use", "file": "demo.v1.json" }]);
    std::fs::write(bad.join("manifest.json"), manifest.to_string()).unwrap();
    let pack = json!({
        "policy_id": "demo.v1",
        "required_context": { "required": ["amount"], "properties": { "amount": { "type": "number" } } },
        "rules": [{ "condition": "amount > limits.nowhere.at.all", "deny_code": "oap.limit_exceeded" }],
        "min_assurance": "L1"
    });
    std::fs::write(bad.join("demo.v1.json"), pack.to_string()).unwrap();
    let out = oap(dir.path(), &["policy", "lint", "bad"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("ERROR demo.v1.json rule#1"), "{}", stdout(&out));

    let warn = dir.path().join("warn");
    std::fs::create_dir(&warn).unwrap();
    std::fs::write(warn.join("manifest.json"), manifest.to_string()).unwrap();
    let pack = json!({
        "policy_id": "demo.v1",
        "required_context": { "required": ["amount"], "properties": { "amount": { "type": "number" } } },
        "rules": [{ "condition": "amount > 5", "deny_code": "oap.limit_exceeded" }],
        "min_assurance": "L1",
        "owner": "payments-team"
    });
    std::fs::write(warn.join("demo.v1.json"), pack.to_string()).unwrap();
    let out = oap(dir.path(), &["policy", "lint", "warn"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).starts_with("WARNING demo.v1"), "{}", stdout(&out));
}

#[test]
fn decide_exit_codes_track_verdicts() {
    let dir = workspace(EXAMPLE_DRAFT);
    let out = decide(dir.path(), "payments.charge", r#"{"amount":40,"currency":"USD"}"#);
    assert_eq!(out.status.code(), Some(0));
    let body: Json = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(body["decision"], "ALLOW");
    let keys: Vec<_> = body.as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys, ["decision", "decision_id", "deny_code", "reason", "signature"]);

    let out = decide(dir.path(), "payments.charge", r#"{"amount":9000,"currency":"USD"}"#);
    assert_eq!(out.status.code(), Some(3));

    let escalating = EXAMPLE_DRAFT.replace("\"allow_pii\": false", "\"allow_pii\": false, \"approval_required\": true");
    let dir = workspace(&escalating);
    let out = decide(dir.path(), "payments.charge", r#"{"amount":40,"currency":"USD"}"#);
    assert_eq!(out.status.code(), Some(4));
    let body: Json = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(body["deny_code"], "oap.approval_required");

    assert_eq!(decide(dir.path(), "payments.charge", "[1,2]").status.code(), Some(2));
}

#[test]
fn decide_reads_context_from_stdin() {
    let dir = workspace(EXAMPLE_DRAFT);
    let mut child = Command::new(env!("CARGO_BIN_EXE_oap"))
        .current_dir(dir.path())
        .env_remove("OAP_FAIL_OPEN")
        .args(["decide", "--passport", "passport.json", "--capability", "web.fetch", "--context", "-"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(br#"{"host":"api.github.com"}"#).unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
}

#[test]
fn audit_verify_detects_edits_to_the_log() {
    let dir = workspace(EXAMPLE_DRAFT);
    let d = dir.path();
    for amount in [10, 20, 30] {
        decide(d, "payments.charge", &format!(r#"{{"amount":{amount},"currency":"USD"}}"#));
    }
    let out = oap(d, &["audit", "verify", EXAMPLE_AGENT_ID]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), format!("ok {EXAMPLE_AGENT_ID} 3 entries"));

    let export = oap(d, &["audit", "export", EXAMPLE_AGENT_ID]);
    let lines: Vec<Json> = stdout(&export).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    let second_id = lines[1]["decision_id"].as_str().unwrap().to_owned();
    let second_seq = lines[1]["seq"].as_u64().unwrap();

    // Same-length edit inside the second entry.
    let segment = d.join("audit").join(EXAMPLE_AGENT_ID).join("000000.log");
    let bytes = std::fs::read(&segment).unwrap();
    let at = bytes.windows(second_id.len()).position(|w| w == second_id.as_bytes()).unwrap();
    let mut tampered = bytes.clone();
    let last = at + second_id.len() - 1;
    tampered[last] = if tampered[last] == b'0' { b'1' } else { b'0' };
    std::fs::write(&segment, tampered).unwrap();

    let out = oap(d, &["audit", "verify", EXAMPLE_AGENT_ID]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("tampered {EXAMPLE_AGENT_ID} seq={second_seq}")), "{err}");
}

#[test]
fn cli_and_library_decide_alike() {
    let dir = workspace(EXAMPLE_DRAFT);
    let bed = TestBed::bundled();
    let passport = fixtures::example_passport(&bed.ring());
    bed.clock.set(chrono::Utc::now());
    let cases = [
        ("payments.charge", r#"{"amount":40,"currency":"USD"}"#),
        ("payments.charge", r#"{"amount":5001,"currency":"USD"}"#),
        ("payments.charge", r#"{"amount":-1,"currency":"USD"}"#),
        ("web.fetch", r#"{"host":"x.acme.internal"}"#),
        ("web.fetch", r#"{"host":"evil.example"}"#),
        ("data.file.read", r#"{"path":"/etc/passwd"}"#),
        ("messaging.send", r#"{"channel":"email"}"#),
    ];
    for (capability, context) in cases {
        let out = oap(dir.path(), &["decide", "--passport", "passport.json", "--capability", capability, "--context", context, "--full"]);
        let cli: Json = serde_json::from_str(&stdout(&out)).unwrap();
        let mut call = fixtures::call(EXAMPLE_AGENT_ID, capability, context);
        call.received_at = bed.clock.now();
        let lib = bed.engine.authorize(&call, &passport).unwrap().decision;
        assert_eq!(cli["decision"], lib.verdict.to_string(), "{capability} {context}");
        assert_eq!(cli["deny_code"], lib.deny_code, "{capability} {context}");
        assert_eq!(cli["reason"], lib.reason, "{capability} {context}");
    }
    assert!(parse_passport(&std::fs::read(dir.path().join("passport.json")).unwrap()).is_ok());
}

#[test]
fn replay_report_is_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (workers, file) in [("1", "one.json"), ("3", "three.json")] {
        let out = oap(d, &["sim", "replay", "--tier", "t1", "--n", "300", "--seed", "9", "--workers", workers, "--report", file]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let one = std::fs::read(d.join("one.json")).unwrap();
    assert_eq!(one, std::fs::read(d.join("three.json")).unwrap());
    let report: Json = serde_json::from_slice(&one).unwrap();
    assert_eq!(report["attempts"], 300);
}

#[test]
fn bench_rejects_unknown_mode() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(oap(dir.path(), &["sim", "bench", "--mode", "warp"]).status.code(), Some(2));
}
