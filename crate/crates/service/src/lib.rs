//! HTTP front end for the authorization engine: discovery, the verify
//! endpoint, and a small passport registry.
//!
//! The HTTP layer makes no decisions of its own. It resolves the passport
//! (registry lookup through a TTL cache, or inline), builds the tool call and
//! hands both to [`Engine`]; the response body is the engine's signed,
//! canonical decision.

pub mod config;
pub mod registry;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use oap_core::audit::{AuditLog, AuditStore, FileStore, MemoryStore, WriteMode};
use oap_core::clock::format_timestamp;
use oap_core::crypt::{self, Keyring, KeyringHandle};
use oap_core::engine::{EngineConfig, EngineError, Unresolved};
use oap_core::model::{parse_params, Passport, PassportStatus, ToolCall};
use oap_core::policy::{load_pack_library, LibraryHandle, PackLibrary};
use oap_core::simharness::BenchMode;
use oap_core::{Engine, Value};
use serde_json::json;

pub use config::ServiceConfig;
pub use registry::{PassportCache, Registry, RegistryError};

pub const OAP_VERSION: &str = "1.0";
pub const DISCOVERY_PATH: &str = "/.well-known/oap/";
pub const KEYS_PATH: &str = "/.well-known/oap/keys";
pub const VERIFY_PATH: &str = "/api/verify/policy";

pub const DECISION_ID_HEADER: &str = "x-oap-decision-id";
pub const WARNING_HEADER: &str = "x-oap-warning";
/// Handler time in microseconds, from entry to the serialized body.
pub const PROCESSING_HEADER: &str = "x-oap-processing-us";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error("keyring: {0}")]
    Keyring(#[from] crypt::CryptError),
    #[error("packs: {0}")]
    Packs(#[from] oap_core::policy::LibraryError),
    #[error("audit store: {0}")]
    Audit(#[from] oap_core::audit::StoreError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A fully rendered HTTP answer. Kept independent of axum so that handlers
/// can be exercised as plain functions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub status: StatusCode,
    pub body: String,
    pub headers: Vec<(&'static str, String)>,
}

impl Reply {
    fn json(status: StatusCode, body: String) -> Self {
        Reply { status, body, headers: Vec::new() }
    }

    fn error(status: StatusCode, message: impl std::fmt::Display) -> Self {
        Reply::json(status, json!({ "error": message.to_string() }).to_string())
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(n, _)| n.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

impl IntoResponse for Reply {
    fn into_response(self) -> Response {
        let mut response = (self.status, self.body).into_response();
        let headers = response.headers_mut();
        headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
        for (name, value) in self.headers {
            if let Ok(v) = HeaderValue::from_str(&value) {
                headers.insert(name, v);
            }
        }
        response
    }
}

pub struct Service {
    engine: Engine,
    registry: Registry,
    cache: PassportCache,
    config: ServiceConfig,
    /// Serializes read-modify-write registry changes.
    admin: Mutex<()>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Service {
    pub fn new(engine: Engine, registry: Registry, config: ServiceConfig) -> Self {
        let cache = PassportCache::new(config.cache_ttl_seconds);
        Service { engine, registry, cache, config, admin: Mutex::new(()) }
    }

    /// Builds everything from config: keyring (a key is generated when none
    /// can sign), pack library, audit store and registry.
    pub fn from_config(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let now = chrono::Utc::now();
        let mut ring = match &config.keyring {
            Some(dir) => Keyring::load(dir)?,
            None => Keyring::new(),
        };
        if ring.active_signer().is_none() {
            let label = format!("auto-{}", now.format("%Y%m%d%H%M%S"));
            let key_id = ring.generate_key(&label, now)?.key_id.clone();
            if let Some(dir) = &config.keyring {
                ring.save(dir)?;
            }
            tracing::info!(%key_id, "generated registry signing key");
        }
        let keys = Arc::new(KeyringHandle::new(ring));

        let library = match &config.packs {
            Some(dir) => load_pack_library(dir)?,
            None => PackLibrary::bundled(),
        };
        let store: Arc<dyn AuditStore> = match &config.audit {
            Some(dir) => Arc::new(FileStore::open(dir)?),
            None => Arc::new(MemoryStore::new()),
        };
        let mode = if config.sync_audit { WriteMode::Sync } else { WriteMode::Async };
        let audit = Arc::new(AuditLog::new(store, keys.clone(), mode));
        let engine_config = EngineConfig { fail_open: config.fail_open || EngineConfig::from_env().fail_open };
        let engine = Engine::new(keys, Arc::new(LibraryHandle::new(library)), audit).with_config(engine_config);

        let registry = match &config.registry {
            Some(dir) => Registry::open(dir)?,
            None => Registry::in_memory(),
        };
        Ok(Service::new(engine, registry, config))
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn cache(&self) -> &PassportCache {
        &self.cache
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn discovery_document(&self) -> serde_json::Value {
        let base = self.config.base_url();
        json!({
            "oap_version": OAP_VERSION,
            "authorization_endpoint": format!("{base}{VERIFY_PATH}"),
            "supported_policy_packs": self.engine.library().snapshot().policy_ids(),
            "keys_endpoint": format!("{base}{KEYS_PATH}"),
        })
    }

    pub fn key_list(&self) -> serde_json::Value {
        let ring = self.engine.keys().snapshot();
        let keys: Vec<_> = ring
            .keys()
            .iter()
            .map(|k| {
                json!({
                    "key_id": k.key_id,
                    "public_key": k.public_key_b64(),
                    "created_at": format_timestamp(&k.created_at),
                    "retired": k.retired,
                })
            })
            .collect();
        json!({ "keys": keys })
    }

    /// Registry lookup through the cache. Expiry is measured on the engine clock.
    pub fn resolve(&self, agent_id: &str) -> Result<Passport, Unresolved> {
        let now = self.engine.clock().now();
        if let Some(p) = self.cache.get(agent_id, now) {
            return Ok(p);
        }
        match self.registry.get(agent_id) {
            Ok(Some(p)) => {
                self.cache.put(&p, now);
                Ok(p)
            }
            Ok(None) => Err(Unresolved::UnknownAgent),
            Err(e) => Err(Unresolved::RegistryUnavailable(e.to_string())),
        }
    }

    /// The verify endpoint. `path_capability` comes from the URL, if present.
    pub fn verify(&self, path_capability: Option<&str>, body: &[u8]) -> Reply {
        let started = Instant::now();
        let request = match VerifyRequest::parse(body) {
            Ok(r) => r,
            Err(msg) => return Reply::error(StatusCode::BAD_REQUEST, msg),
        };

        let mut warning = None;
        let capability_id = match (request.capability_id, path_capability) {
            (Some(body_cap), Some(path_cap)) => {
                if body_cap != path_cap {
                    warning = Some(format!("capability_id `{body_cap}` in body overrides `{path_cap}` in path"));
                }
                body_cap
            }
            (Some(cap), None) => cap,
            (None, Some(cap)) => cap.to_owned(),
            (None, None) => {
                return Reply::error(StatusCode::BAD_REQUEST, "capability_id missing from both path and body")
            }
        };

        let (agent_id, passport) = match request.subject {
            Subject::AgentId(id) => {
                let resolved = self.resolve(&id);
                (id, resolved)
            }
            Subject::Passport(value) => {
                let claimed = value
                    .as_object()
                    .and_then(|o| o.get("agent_id"))
                    .and_then(Value::as_str)
                    .unwrap_or_default()
                    .to_owned();
                let parsed = Passport::from_value(value).map_err(|e| Unresolved::InvalidPassport(e.to_string()));
                (claimed, parsed)
            }
        };

        let call = ToolCall {
            capability_id,
            params: request.params,
            agent_id,
            request_id: String::new(),
            received_at: self.engine.clock().now(),
        };
        let (authorization, status) = match &passport {
            Ok(p) => (self.engine.authorize(&call, p), StatusCode::OK),
            Err(cause) => {
                let status = if *cause == Unresolved::UnknownAgent { StatusCode::NOT_FOUND } else { StatusCode::OK };
                (self.engine.decide_unresolved(&call, cause), status)
            }
        };
        let decision = match authorization {
            Ok(a) => a.decision,
            Err(EngineError::NoSigningKey) => {
                return Reply::error(StatusCode::SERVICE_UNAVAILABLE, EngineError::NoSigningKey)
            }
        };

        let mut reply = Reply::json(status, decision.to_canonical_string());
        reply.headers.push((DECISION_ID_HEADER, decision.decision_id.clone()));
        if let Some(w) = warning {
            reply.headers.push((WARNING_HEADER, w));
        }
        reply.headers.push((PROCESSING_HEADER, started.elapsed().as_micros().to_string()));
        reply
    }

    fn check_admin(&self, headers: &HeaderMap) -> Result<(), Reply> {
        let Some(expected) = &self.config.admin_token else {
            return Err(Reply::error(StatusCode::FORBIDDEN, "admin endpoints are disabled (no admin_token configured)"));
        };
        let presented = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        match presented {
            Some(token) if constant_time_eq(token.as_bytes(), expected.as_bytes()) => Ok(()),
            _ => Err(Reply::error(StatusCode::UNAUTHORIZED, "missing or wrong bearer token")),
        }
    }

    /// Signs and stores a draft. `issued_at` defaults to now.
    pub fn issue(&self, body: &[u8]) -> Reply {
        let value = match Value::parse(body) {
            Ok(v) => v,
            Err(e) => return Reply::error(StatusCode::BAD_REQUEST, format!("body is not JSON: {e}")),
        };
        let mut draft = match Passport::from_value(value) {
            Ok(p) => p,
            Err(e) => return Reply::error(StatusCode::UNPROCESSABLE_ENTITY, e),
        };
        if draft.issued_at.is_none() {
            let now = self.engine.clock().now();
            let now = now - chrono::Duration::nanoseconds(now.timestamp_subsec_nanos() as i64);
            if draft.expires_at.is_some_and(|e| e <= now) {
                return Reply::error(StatusCode::UNPROCESSABLE_ENTITY, "expires_at: must be strictly after issued_at");
            }
            draft.issued_at = Some(now);
        }
        let ring = self.engine.keys().snapshot();
        let Some(key) = ring.active_signer() else {
            return Reply::error(StatusCode::SERVICE_UNAVAILABLE, EngineError::NoSigningKey);
        };
        if let Err(e) = crypt::sign_passport(&mut draft, key) {
            return Reply::error(StatusCode::SERVICE_UNAVAILABLE, e);
        }
        let _guard = self.admin.lock().unwrap();
        match self.registry.insert(&draft) {
            Ok(()) => {
                self.cache.invalidate(&draft.agent_id);
                Reply::json(StatusCode::CREATED, String::from_utf8(draft.serialize().into_bytes()).expect("utf-8"))
            }
            Err(e) => registry_error(e),
        }
    }

    pub fn lookup(&self, agent_id: &str) -> Reply {
        match self.registry.get(agent_id) {
            Ok(Some(p)) => Reply::json(StatusCode::OK, String::from_utf8(p.serialize().into_bytes()).expect("utf-8")),
            Ok(None) => Reply::error(StatusCode::NOT_FOUND, RegistryError::NotFound(agent_id.to_owned())),
            Err(e) => registry_error(e),
        }
    }

    /// Moves a passport to a new status, re-signs it and drops it from the cache.
    pub fn set_status(&self, agent_id: &str, body: &[u8]) -> Reply {
        let status = serde_json::from_slice::<serde_json::Value>(body)
            .ok()
            .and_then(|v| v.get("status").and_then(|s| s.as_str()).and_then(PassportStatus::parse));
        let Some(next) = status else {
            return Reply::error(StatusCode::BAD_REQUEST, "body must be {\"status\": \"active\"|\"suspended\"|\"revoked\"}");
        };
        let ring = self.engine.keys().snapshot();
        let Some(key) = ring.active_signer() else {
            return Reply::error(StatusCode::SERVICE_UNAVAILABLE, EngineError::NoSigningKey);
        };

        let _guard = self.admin.lock().unwrap();
        let current = match self.registry.get(agent_id) {
            Ok(Some(p)) => p,
            Ok(None) => return Reply::error(StatusCode::NOT_FOUND, RegistryError::NotFound(agent_id.to_owned())),
            Err(e) => return registry_error(e),
        };
        let updated = match registry::transition(&current, next, key) {
            Ok(p) => p,
            Err(e) => return registry_error(e),
        };
        if let Err(e) = self.registry.replace(&updated) {
            return registry_error(e);
        }
        self.cache.invalidate(agent_id);
        tracing::info!(agent_id, from = %current.status, to = %next, "passport status changed");
        Reply::json(StatusCode::OK, String::from_utf8(updated.serialize().into_bytes()).expect("utf-8"))
    }

    /// Re-reads the pack directory and keyring, then clears the passport cache.
    pub fn reload(&self) -> Result<serde_json::Value, ServiceError> {
        if let Some(dir) = &self.config.packs {
            let library = load_pack_library(dir)?;
            self.engine.library().replace(library);
        }
        if let Some(dir) = &self.config.keyring {
            let ring = Keyring::load(dir)?;
            if ring.active_signer().is_none() {
                return Err(ServiceError::Config(format!("{} holds no usable signing key", dir.display())));
            }
            self.engine.keys().replace(ring);
        }
        self.cache.clear();
        Ok(json!({
            "supported_policy_packs": self.engine.library().snapshot().policy_ids(),
            "keys": self.engine.keys().snapshot().keys().len(),
        }))
    }
}

fn registry_error(e: RegistryError) -> Reply {
    let status = match &e {
        RegistryError::Duplicate(_) | RegistryError::InvalidTransition { .. } => StatusCode::CONFLICT,
        RegistryError::NotFound(_) => StatusCode::NOT_FOUND,
        RegistryError::BadAgentId(_) => StatusCode::UNPROCESSABLE_ENTITY,
        RegistryError::Signing(_) | RegistryError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
    };
    Reply::error(status, e)
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

enum Subject {
    AgentId(String),
    Passport(Value),
}

struct VerifyRequest {
    subject: Subject,
    capability_id: Option<String>,
    params: oap_core::model::Params,
}

impl VerifyRequest {
    fn parse(body: &[u8]) -> Result<Self, String> {
        let value = Value::parse(body).map_err(|e| format!("body is not JSON: {e}"))?;
        let Some(mut fields) = value.into_object() else {
            return Err("body must be a JSON object".into());
        };
        let agent_id = fields.remove("agent_id");
        let passport = fields.remove("passport");
        let capability_id = match fields.remove("capability_id") {
            Some(Value::String(s)) => Some(s),
            Some(_) => return Err("capability_id must be a string".into()),
            None => None,
        };
        let context = fields.remove("context").unwrap_or_else(|| Value::Object(BTreeMap::new()));
        if let Some(extra) = fields.keys().next() {
            return Err(format!("unknown field `{extra}`"));
        }
        let subject = match (agent_id, passport) {
            (Some(Value::String(id)), None) => Subject::AgentId(id),
            (Some(_), None) => return Err("agent_id must be a string".into()),
            (None, Some(p)) => Subject::Passport(p),
            _ => return Err("body needs exactly one of agent_id or passport".into()),
        };
        let params = parse_params(context).map_err(|e| format!("context: {e}"))?;
        Ok(VerifyRequest { subject, capability_id, params })
    }
}

type Shared = State<Arc<Service>>;

async fn discovery(State(s): Shared) -> Reply {
    Reply::json(StatusCode::OK, s.discovery_document().to_string())
}

async fn keys(State(s): Shared) -> Reply {
    Reply::json(StatusCode::OK, s.key_list().to_string())
}

async fn verify_with_path(State(s): Shared, Path(capability_id): Path<String>, body: Bytes) -> Reply {
    s.verify(Some(&capability_id), &body)
}

async fn verify_body_only(State(s): Shared, body: Bytes) -> Reply {
    s.verify(None, &body)
}

async fn issue(State(s): Shared, headers: HeaderMap, body: Bytes) -> Reply {
    match s.check_admin(&headers) {
        Ok(()) => s.issue(&body),
        Err(r) => r,
    }
}

async fn lookup(State(s): Shared, Path(agent_id): Path<String>) -> Reply {
    s.lookup(&agent_id)
}

async fn set_status(State(s): Shared, Path(agent_id): Path<String>, headers: HeaderMap, body: Bytes) -> Reply {
    match s.check_admin(&headers) {
        Ok(()) => s.set_status(&agent_id, &body),
        Err(r) => r,
    }
}

async fn reload(State(s): Shared, headers: HeaderMap) -> Reply {
    if let Err(r) = s.check_admin(&headers) {
        return r;
    }
    match s.reload() {
        Ok(v) => Reply::json(StatusCode::OK, v.to_string()),
        Err(e) => Reply::error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route(DISCOVERY_PATH, get(discovery))
        .route("/.well-known/oap", get(discovery))
        .route(KEYS_PATH, get(keys))
        .route(VERIFY_PATH, post(verify_body_only))
        .route("/api/verify/policy/{capability_id}", post(verify_with_path))
        .route("/api/passports", post(issue))
        .route("/api/passports/{agent_id}", get(lookup))
        .route("/api/passports/{agent_id}/status", post(set_status))
        .route("/api/admin/reload", post(reload))
        .with_state(service)
}

/// Serves until ctrl-c, then drains the audit queue.
pub async fn serve(service: Arc<Service>) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(&service.config.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(service.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    if let Err(e) = service.engine.audit().flush() {
        tracing::warn!(error = %e, "audit entries still buffered at shutdown");
    }
    Ok(())
}

/// A server on its own runtime thread, for callers without one (the CLI
/// bench, tests). Dropping it shuts the server down.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(service: Arc<Service>, listen: &str) -> Result<Self, ServiceError> {
        let std_listener = std::net::TcpListener::bind(listen)?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener registers");
                let _ = axum::serve(listener, router(service))
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(BackgroundServer { addr, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Path and body for one verify request in the given HTTP mode, carrying
/// the same logical input each time. `None` for the in-process mode.
pub fn verify_request(mode: BenchMode, passport: &Passport, capability_id: &str, context: &Value) -> Option<(String, String)> {
    let mut body = BTreeMap::new();
    let path_form = match mode {
        BenchMode::InProcess => return None,
        BenchMode::ApiAgentIdPath | BenchMode::ApiPassportPath => true,
        BenchMode::ApiAgentIdBody | BenchMode::ApiPassportBody => false,
    };
    match mode {
        BenchMode::ApiAgentIdPath | BenchMode::ApiAgentIdBody => {
            body.insert("agent_id".to_owned(), Value::from(passport.agent_id.as_str()));
        }
        _ => {
            body.insert("passport".to_owned(), passport.to_value());
        }
    }
    body.insert("context".to_owned(), context.clone());
    let path = if path_form {
        format!("{VERIFY_PATH}/{capability_id}")
    } else {
        body.insert("capability_id".to_owned(), Value::from(capability_id));
        VERIFY_PATH.to_owned()
    };
    Some((path, Value::Object(body).to_canonical_string()))
}
