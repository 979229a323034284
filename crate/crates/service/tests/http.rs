use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine as _;
use chrono::Duration;
use http_body_util::BodyExt;
use oap_core::audit::{AuditLog, MemoryStore, WriteMode};
use oap_core::crypt::{self, Keyring, KeyringHandle};
use oap_core::engine::{deny, SeededIds, Verdict};
use oap_core::fixtures::{self, EXAMPLE_AGENT_ID, EXAMPLE_DRAFT};
use oap_core::model::parse_passport;
use oap_core::policy::{LibraryHandle, PackLibrary};
use oap_core::{Decision, Engine, ManualClock, Passport};
use oap_service::{router, Registry, Service, ServiceConfig, DECISION_ID_HEADER, WARNING_HEADER};
use serde_json::{json, Value as Json};
use tower::ServiceExt;

const TOKEN: &str = "s3cret";

struct Harness {
    service: Arc<Service>,
    clock: Arc<ManualClock>,
    ring: Arc<Keyring>,
}

fn harness_with(config: ServiceConfig, registry: Registry, seed: u64) -> Harness {
    let keys = Arc::new(KeyringHandle::new(fixtures::test_keyring()));
    let clock = Arc::new(ManualClock::new(fixtures::t0()));
    let audit = Arc::new(AuditLog::new(Arc::new(MemoryStore::new()), keys.clone(), WriteMode::Sync));
    let engine = Engine::new(keys.clone(), Arc::new(LibraryHandle::new(PackLibrary::bundled())), audit)
        .with_clock(clock.clone())
        .with_ids(Box::new(SeededIds::new(seed)));
    let ring = keys.snapshot();
    Harness { service: Arc::new(Service::new(engine, registry, config)), clock, ring }
}

fn harness() -> Harness {
    let config = ServiceConfig { admin_token: Some(TOKEN.into()), ..ServiceConfig::default() };
    harness_with(config, Registry::in_memory(), 0)
}

/// Example passport with the USD per-transaction limit set to 100.
fn charge_passport(ring: &Keyring) -> Passport {
    let draft = EXAMPLE_DRAFT.replace("\"max_per_tx\": 5000", "\"max_per_tx\": 100");
    fixtures::sign(parse_passport(draft.as_bytes()).unwrap(), ring)
}

struct Answer {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: String,
}

impl Answer {
    fn json(&self) -> Json {
        serde_json::from_str(&self.body).unwrap()
    }

    fn decision(&self) -> Decision {
        Decision::parse(self.body.as_bytes()).unwrap()
    }
}

async fn send(h: &Harness, method: &str, uri: &str, body: Option<String>, token: Option<&str>) -> Answer {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let resp = router(h.service.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    Answer { status, headers, body: String::from_utf8(bytes.to_vec()).unwrap() }
}

fn register(h: &Harness, passport: &Passport) {
    h.service.registry().insert(passport).unwrap();
}

fn packs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/packs")
}

#[tokio::test]
async fn discovery_mirrors_library_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(packs_dir()).unwrap() {
        let p = entry.unwrap().path();
        std::fs::copy(&p, dir.path().join(p.file_name().unwrap())).unwrap();
    }
    let config = ServiceConfig {
        admin_token: Some(TOKEN.into()),
        packs: Some(dir.path().to_owned()),
        public_url: Some("https://registry.example".into()),
        ..ServiceConfig::default()
    };
    let h = harness_with(config, Registry::in_memory(), 0);

    let a = send(&h, "GET", "/.well-known/oap/", None, None).await;
    assert_eq!(a.status, StatusCode::OK);
    assert_eq!(a.headers["content-type"], "application/json");
    let doc = a.json();
    assert_eq!(doc["oap_version"], "1.0");
    assert_eq!(doc["authorization_endpoint"], "https://registry.example/api/verify/policy");
    assert_eq!(doc["keys_endpoint"], "https://registry.example/.well-known/oap/keys");
    let listed: Vec<String> = serde_json::from_value(doc["supported_policy_packs"].clone()).unwrap();
    assert_eq!(listed, PackLibrary::bundled().policy_ids());
    assert_eq!(listed.len(), 6);

    // Add a seventh pack and hot-reload.
    let extra = json!({
        "policy_id": "calendar.event.create.v1",
        "required_context": {"type": "object", "required": ["title"], "properties": {"title": {"type": "string"}}},
        "rules": [],
        "min_assurance": "L1"
    });
    std::fs::write(dir.path().join("calendar.event.create.v1.json"), extra.to_string()).unwrap();
    let mut manifest: Json = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    manifest
        .as_array_mut()
        .unwrap()
        .push(json!({"capability_id": "calendar.event.create", "file": "calendar.event.create.v1.json"}));
    std::fs::write(dir.path().join("manifest.json"), manifest.to_string()).unwrap();

    assert_eq!(send(&h, "POST", "/api/admin/reload", None, None).await.status, StatusCode::UNAUTHORIZED);
    let r = send(&h, "POST", "/api/admin/reload", None, Some(TOKEN)).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.body);
    let doc = send(&h, "GET", "/.well-known/oap", None, None).await.json();
    assert_eq!(doc["supported_policy_packs"].as_array().unwrap().len(), 7);
}

#[tokio::test]
async fn keys_endpoint_serves_public_halves() {
    let h = harness();
    let a = send(&h, "GET", "/.well-known/oap/keys", None, None).await;
    assert_eq!(a.status, StatusCode::OK);
    let keys = a.json()["keys"].as_array().unwrap().clone();
    assert_eq!(keys.len(), 1);
    assert_eq!(keys[0]["key_id"], "oap:registry:key-2025-01");
    assert_eq!(keys[0]["retired"], false);
    let raw = base64::engine::general_purpose::STANDARD.decode(keys[0]["public_key"].as_str().unwrap()).unwrap();
    assert_eq!(raw.len(), 32);
    assert!(!a.body.contains("PRIVATE"));
}

#[tokio::test]
async fn issuance_and_lookup() {
    let h = harness();
    assert_eq!(send(&h, "POST", "/api/passports", Some(EXAMPLE_DRAFT.into()), None).await.status, StatusCode::UNAUTHORIZED);
    assert_eq!(
        send(&h, "POST", "/api/passports", Some(EXAMPLE_DRAFT.into()), Some("wrong")).await.status,
        StatusCode::UNAUTHORIZED
    );

    let a = send(&h, "POST", "/api/passports", Some(EXAMPLE_DRAFT.into()), Some(TOKEN)).await;
    assert_eq!(a.status, StatusCode::CREATED, "{}", a.body);
    let issued = parse_passport(a.body.as_bytes()).unwrap();
    assert!(crypt::verify_passport(&issued, &h.ring));
    assert_eq!(issued.issued_at, Some(fixtures::t0()));

    let dup = send(&h, "POST", "/api/passports", Some(EXAMPLE_DRAFT.into()), Some(TOKEN)).await;
    assert_eq!(dup.status, StatusCode::CONFLICT);

    let got = send(&h, "GET", &format!("/api/passports/{EXAMPLE_AGENT_ID}"), None, None).await;
    assert_eq!(got.status, StatusCode::OK);
    assert_eq!(got.body, a.body);
    assert_eq!(send(&h, "GET", "/api/passports/ap_nobody", None, None).await.status, StatusCode::NOT_FOUND);

    let bad = EXAMPLE_DRAFT.replace("\"L2\"", "\"L9\"");
    assert_eq!(send(&h, "POST", "/api/passports", Some(bad), Some(TOKEN)).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(send(&h, "POST", "/api/passports", Some("{".into()), Some(TOKEN)).await.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn admin_disabled_without_token() {
    let h = harness_with(ServiceConfig::default(), Registry::in_memory(), 0);
    let a = send(&h, "POST", "/api/passports", Some(EXAMPLE_DRAFT.into()), Some("anything")).await;
    assert_eq!(a.status, StatusCode::FORBIDDEN);
}

#[tokio::test]
async fn status_transitions() {
    let h = harness();
    register(&h, &fixtures::example_passport(&h.ring));
    let uri = format!("/api/passports/{EXAMPLE_AGENT_ID}/status");
    let body = |s: &str| Some(json!({ "status": s }).to_string());

    assert_eq!(send(&h, "POST", &uri, body("suspended"), None).await.status, StatusCode::UNAUTHORIZED);
    let a = send(&h, "POST", &uri, body("suspended"), Some(TOKEN)).await;
    assert_eq!(a.status, StatusCode::OK);
    let p = parse_passport(a.body.as_bytes()).unwrap();
    assert_eq!(p.status.as_str(), "suspended");
    assert!(crypt::verify_passport(&p, &h.ring));

    assert_eq!(send(&h, "POST", &uri, body("active"), Some(TOKEN)).await.status, StatusCode::OK);
    assert_eq!(send(&h, "POST", &uri, body("revoked"), Some(TOKEN)).await.status, StatusCode::OK);
    assert_eq!(send(&h, "POST", &uri, body("active"), Some(TOKEN)).await.status, StatusCode::CONFLICT);
    assert_eq!(send(&h, "POST", &uri, body("paused"), Some(TOKEN)).await.status, StatusCode::BAD_REQUEST);
    assert_eq!(
        send(&h, "POST", "/api/passports/ap_nobody/status", body("suspended"), Some(TOKEN)).await.status,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn charge_scenario_by_agent_id() {
    let h = harness();
    register(&h, &charge_passport(&h.ring));
    let body = json!({ "agent_id": EXAMPLE_AGENT_ID, "context": { "amount": 500, "currency": "USD" } }).to_string();
    let a = send(&h, "POST", "/api/verify/policy/payments.charge", Some(body), None).await;
    assert_eq!(a.status, StatusCode::OK);
    let d = a.decision();
    assert_eq!(d.verdict, Verdict::Deny);
    assert_eq!(d.deny_code, deny::LIMIT_EXCEEDED);
    assert_eq!(d.reason, "Amount $500 exceeds max_per_tx limit of $100");
    assert_eq!(a.headers[DECISION_ID_HEADER], d.decision_id.as_str());
    assert!(oap_core::verify_decision(&d, &h.ring));
    // Canonical on the wire, so clients can verify the exact bytes.
    assert_eq!(a.body, d.to_canonical_string());
    assert_eq!(h.service.engine().audit().query(EXAMPLE_AGENT_ID, &Default::default()).unwrap().len(), 1);
}

#[tokio::test]
async fn tampered_inline_passport_is_denied() {
    let h = harness();
    let passport = fixtures::example_passport(&h.ring);
    let mut v: Json = serde_json::from_slice(passport.serialize().as_bytes()).unwrap();
    v["limits"]["currency_limits"]["USD"]["max_per_tx"] = json!(50000);
    let body = json!({ "passport": v, "context": { "amount": 40, "currency": "USD" } }).to_string();
    let a = send(&h, "POST", "/api/verify/policy/payments.charge", Some(body), None).await;
    assert_eq!(a.status, StatusCode::OK);
    assert_eq!(a.decision().deny_code, deny::FAIL_CLOSED);

    let body = json!({ "passport": {"not": "a passport"}, "context": {} }).to_string();
    let a = send(&h, "POST", "/api/verify/policy/payments.charge", Some(body), None).await;
    assert_eq!(a.status, StatusCode::OK);
    assert_eq!(a.decision().deny_code, deny::FAIL_CLOSED);
}

#[tokio::test]
async fn unknown_agent_is_a_signed_404_denial() {
    let h = harness();
    let body = json!({ "agent_id": "ap_unknown", "context": {} }).to_string();
    let a = send(&h, "POST", "/api/verify/policy/web.fetch", Some(body), None).await;
    assert_eq!(a.status, StatusCode::NOT_FOUND);
    let d = a.decision();
    assert_eq!(d.verdict, Verdict::Deny);
    assert_eq!(d.deny_code, deny::FAIL_CLOSED);
    assert!(oap_core::verify_decision(&d, &h.ring));
}

#[tokio::test]
async fn registry_outage_fails_closed() {
    let h = harness();
    register(&h, &fixtures::example_passport(&h.ring));
    h.service.registry().set_available(false);
    let body = json!({ "agent_id": EXAMPLE_AGENT_ID, "context": { "amount": 40, "currency": "USD" } }).to_string();
    let a = send(&h, "POST", "/api/verify/policy/payments.charge", Some(body), None).await;
    assert_eq!(a.status, StatusCode::OK);
    assert_eq!(a.decision().deny_code, deny::FAIL_CLOSED);
}

#[tokio::test]
async fn malformed_bodies_are_400() {
    let h = harness();
    let uri = "/api/verify/policy/web.fetch";
    let cases = [
        "not json".to_string(),
        "[]".to_string(),
        json!({ "context": {} }).to_string(),
        json!({ "agent_id": "a", "passport": {}, "context": {} }).to_string(),
        json!({ "agent_id": 7, "context": {} }).to_string(),
        json!({ "agent_id": "a", "context": [] }).to_string(),
        json!({ "agent_id": "a", "context": { "nested": { "x": 1 } } }).to_string(),
        json!({ "agent_id": "a", "context": {}, "surprise": true }).to_string(),
    ];
    for body in cases {
        let a = send(&h, "POST", uri, Some(body.clone()), None).await;
        assert_eq!(a.status, StatusCode::BAD_REQUEST, "{body}");
        assert!(a.json()["error"].is_string());
    }
    let a = send(&h, "POST", "/api/verify/policy", Some(json!({ "agent_id": "a" }).to_string()), None).await;
    assert_eq!(a.status, StatusCode::BAD_REQUEST);
    // Nothing reached the engine.
    assert!(h.service.engine().audit().store().agents().unwrap().is_empty());
}

#[tokio::test]
async fn body_capability_wins_with_warning() {
    let h = harness();
    register(&h, &fixtures::example_passport(&h.ring));
    let body = json!({
        "agent_id": EXAMPLE_AGENT_ID,
        "capability_id": "payments.charge",
        "context": { "amount": 40, "currency": "USD" }
    })
    .to_string();
    let a = send(&h, "POST", "/api/verify/policy/web.fetch", Some(body.clone()), None).await;
    let d = a.decision();
    assert_eq!(d.capability_id, "payments.charge");
    assert_eq!(d.verdict, Verdict::Allow);
    assert!(a.headers.contains_key(WARNING_HEADER));

    let a = send(&h, "POST", "/api/verify/policy/payments.charge", Some(body), None).await;
    assert!(!a.headers.contains_key(WARNING_HEADER));
}

#[tokio::test]
async fn no_signing_key_is_503() {
    let h = harness();
    h.service.engine().keys().replace(fixtures::test_keyring().public_view());
    let body = json!({ "agent_id": "ap_unknown", "context": {} }).to_string();
    let a = send(&h, "POST", "/api/verify/policy/web.fetch", Some(body), None).await;
    assert_eq!(a.status, StatusCode::SERVICE_UNAVAILABLE);
}

/// Strips the fields that legitimately differ between two equal decisions.
fn logical(d: &Decision) -> Json {
    let mut v: Json = serde_json::from_str(&d.to_canonical_string()).unwrap();
    for k in ["decision_id", "decided_at", "signature"] {
        v.as_object_mut().unwrap().remove(k);
    }
    v
}

#[tokio::test]
async fn four_modes_agree() {
    let h = harness();
    let passport = charge_passport(&h.ring);
    register(&h, &passport);
    let inline: Json = serde_json::from_slice(passport.serialize().as_bytes()).unwrap();

    for context in [json!({ "amount": 500, "currency": "USD" }), json!({ "amount": 40, "currency": "USD" })] {
        let requests = [
            ("/api/verify/policy/payments.charge", json!({ "agent_id": EXAMPLE_AGENT_ID, "context": context })),
            (
                "/api/verify/policy",
                json!({ "agent_id": EXAMPLE_AGENT_ID, "capability_id": "payments.charge", "context": context }),
            ),
            ("/api/verify/policy/payments.charge", json!({ "passport": inline, "context": context })),
            ("/api/verify/policy", json!({ "passport": inline, "capability_id": "payments.charge", "context": context })),
        ];
        let mut seen = Vec::new();
        for (uri, body) in requests {
            let a = send(&h, "POST", uri, Some(body.to_string()), None).await;
            assert_eq!(a.status, StatusCode::OK);
            seen.push(logical(&a.decision()));
        }
        assert!(seen.windows(2).all(|w| w[0] == w[1]), "{seen:#?}");
    }
}

#[tokio::test]
async fn http_layer_adds_no_logic() {
    // Two identical services; one answers over HTTP, the other is asked
    // directly. Same seed and clock, so the signed bytes must match.
    let via_http = harness_with(ServiceConfig::default(), Registry::in_memory(), 42);
    let direct = harness_with(ServiceConfig::default(), Registry::in_memory(), 42);
    let passport = charge_passport(&via_http.ring);
    register(&via_http, &passport);

    let contexts = [
        r#"{"amount":500,"currency":"USD"}"#,
        r#"{"amount":40,"currency":"USD"}"#,
        r#"{"amount":40,"currency":"EUR"}"#,
        r#"{"amount":"40","currency":"USD"}"#,
        r#"{"currency":"USD"}"#,
    ];
    for (i, ctx) in contexts.iter().enumerate() {
        via_http.clock.advance(Duration::seconds(1));
        direct.clock.advance(Duration::seconds(1));
        let body = format!(r#"{{"agent_id":"{EXAMPLE_AGENT_ID}","context":{ctx}}}"#);
        let a = send(&via_http, "POST", "/api/verify/policy/payments.charge", Some(body), None).await;
        let call = fixtures::call(EXAMPLE_AGENT_ID, "payments.charge", ctx);
        let expected = direct.service.engine().authorize(&call, &passport).unwrap().decision;
        assert_eq!(a.body, expected.to_canonical_string(), "context #{i}");
    }
}

#[tokio::test]
async fn suspension_through_the_api_is_immediate() {
    let h = harness();
    register(&h, &fixtures::example_passport(&h.ring));
    let verify = json!({ "agent_id": EXAMPLE_AGENT_ID, "context": { "amount": 40, "currency": "USD" } }).to_string();
    let uri = "/api/verify/policy/payments.charge";
    assert_eq!(send(&h, "POST", uri, Some(verify.clone()), None).await.decision().verdict, Verdict::Allow);

    let s = send(
        &h,
        "POST",
        &format!("/api/passports/{EXAMPLE_AGENT_ID}/status"),
        Some(json!({"status": "suspended"}).to_string()),
        Some(TOKEN),
    )
    .await;
    assert_eq!(s.status, StatusCode::OK);
    h.clock.advance(Duration::seconds(1));
    assert_eq!(send(&h, "POST", uri, Some(verify), None).await.decision().deny_code, deny::PASSPORT_SUSPENDED);
}

#[tokio::test]
async fn out_of_band_suspension_lands_within_ttl() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig { cache_ttl_seconds: 10, ..ServiceConfig::default() };
    let h = harness_with(config, Registry::open(dir.path()).unwrap(), 0);
    let passport = fixtures::example_passport(&h.ring);
    register(&h, &passport);
    let verify = json!({ "agent_id": EXAMPLE_AGENT_ID, "context": { "amount": 40, "currency": "USD" } }).to_string();
    let uri = "/api/verify/policy/payments.charge";
    assert_eq!(send(&h, "POST", uri, Some(verify.clone()), None).await.decision().verdict, Verdict::Allow);

    // Another process rewrites the registry file; this service still holds the cached copy.
    let key = fixtures::test_key(fixtures::TEST_KEY_LABEL, 1);
    let suspended = oap_service::registry::transition(&passport, oap_core::PassportStatus::Suspended, &key).unwrap();
    Registry::open(dir.path()).unwrap().replace(&suspended).unwrap();

    h.clock.advance(Duration::seconds(5));
    assert_eq!(send(&h, "POST", uri, Some(verify.clone()), None).await.decision().verdict, Verdict::Allow);
    h.clock.advance(Duration::seconds(6));
    assert_eq!(send(&h, "POST", uri, Some(verify), None).await.decision().deny_code, deny::PASSPORT_SUSPENDED);
}

#[test]
fn background_server_answers_real_sockets() {
    let h = harness();
    let server = oap_service::BackgroundServer::start(h.service.clone(), "127.0.0.1:0").unwrap();
    use std::io::{Read, Write};
    let mut s = std::net::TcpStream::connect(server.addr).unwrap();
    write!(s, "GET /.well-known/oap/ HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    assert!(out.starts_with("HTTP/1.1 200"), "{out}");
    assert!(out.contains("\"oap_version\":\"1.0\""));
}
