//! `oap`: operator command line.
//!
//! Exit codes: 0 allow/ok, 1 verification failure, 2 usage or validation
//! error, 3 deny, 4 escalate.

mod bench;

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use oap_core::audit::{self, AuditLog, AuditStore, FileStore, WriteMode};
use oap_core::crypt::{self, Keyring, KeyringHandle};
use oap_core::engine::{explain, EngineConfig, Verdict};
use oap_core::model::{parse_params, parse_passport, PassportStatus, ToolCall};
use oap_core::policy::{lint_pack_dir, load_pack_library, LibraryHandle, PackLibrary, Severity};
use oap_core::simharness::{self, BenchMode, ReplayConfig, Tier};
use oap_core::{Engine, Value};
use oap_service::registry::{self, Registry};
use oap_service::{Service, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "oap", version, about = "Pre-action authorization for AI agent tool calls")]
struct Cli {
    #[command(flatten)]
    dirs: Dirs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Dirs {
    /// Keyring directory (ring.json plus PEM keys).
    #[arg(long, global = true, env = "OAP_KEYS", default_value = "keys")]
    keys: PathBuf,
    /// Passport registry directory.
    #[arg(long, global = true, env = "OAP_REGISTRY", default_value = "registry")]
    registry: PathBuf,
    /// Audit chain directory.
    #[arg(long, global = true, env = "OAP_AUDIT", default_value = "audit")]
    audit: PathBuf,
    /// Policy pack directory with manifest.json; the bundled packs when absent.
    #[arg(long, global = true, env = "OAP_PACKS")]
    packs: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Add a signing key to the keyring.
    Keygen {
        #[arg(long)]
        label: String,
        /// Retire every existing key so the new one becomes the signer.
        #[arg(long)]
        rotate: bool,
    },
    #[command(subcommand)]
    Passport(PassportCmd),
    #[command(subcommand)]
    Policy(PolicyCmd),
    /// Evaluate one tool call and print the decision.
    Decide {
        #[arg(long)]
        passport: PathBuf,
        #[arg(long)]
        capability: String,
        /// Context object as JSON, or `-` for stdin.
        #[arg(long)]
        context: String,
        /// Print the full signed decision instead of the five-field denial form.
        #[arg(long)]
        full: bool,
        #[arg(long)]
        fail_open: bool,
    },
    #[command(subcommand)]
    Audit(AuditCmd),
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    #[command(subcommand)]
    Sim(SimCmd),
}

#[derive(Debug, Subcommand)]
enum PassportCmd {
    /// Sign a draft passport.
    Issue {
        #[arg(long)]
        draft: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also store it in the registry directory.
        #[arg(long)]
        register: bool,
    },
    /// Check a signed passport against the keyring.
    Verify { file: PathBuf },
    /// Change a registered passport's status and re-sign it.
    SetStatus { agent_id: String, status: String },
}

#[derive(Debug, Subcommand)]
enum PolicyCmd {
    Lint { dir: PathBuf },
}

#[derive(Debug, Subcommand)]
enum AuditCmd {
    Verify { agent_id: String },
    /// Dump a chain as JSON lines.
    Export { agent_id: String },
}

#[derive(Debug, Subcommand)]
enum SimCmd {
    /// Replay a synthetic adversarial corpus.
    Replay {
        #[arg(long, value_parser = parse_tier)]
        tier: Tier,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Judge the attempts against the scoped restrictive passport.
        #[arg(long)]
        scoped: bool,
    },
    /// Time warm authorizations.
    Bench {
        #[arg(long, value_parser = parse_mode, default_value = "in_process")]
        mode: BenchMode,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Raw samples as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_tier(s: &str) -> Result<Tier, String> {
    Tier::parse(s).ok_or_else(|| format!("unknown tier `{s}` (t1, t5)"))
}

fn parse_mode(s: &str) -> Result<BenchMode, String> {
    BenchMode::parse(s).ok_or_else(|| {
        let all: Vec<_> = BenchMode::ALL.iter().map(|m| m.as_str()).collect();
        format!("unknown mode `{s}` ({})", all.join(", "))
    })
}

#[derive(Debug, thiserror::Error)]
enum Failure {
    /// Exit 1.
    #[error("{0}")]
    Verify(String),
    /// Exit 2.
    #[error("{0}")]
    Usage(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verify(_) => 1,
            Failure::Usage(_) => 2,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("oap: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let dirs = &cli.dirs;
    match cli.command {
        Command::Keygen { label, rotate } => keygen(dirs, &label, rotate),
        Command::Passport(PassportCmd::Issue { draft, out, register }) => issue(dirs, &draft, out.as_deref(), register),
        Command::Passport(PassportCmd::Verify { file }) => verify_passport(dirs, &file),
        Command::Passport(PassportCmd::SetStatus { agent_id, status }) => set_status(dirs, &agent_id, &status),
        Command::Policy(PolicyCmd::Lint { dir }) => lint(&dir),
        Command::Decide { passport, capability, context, full, fail_open } => {
            decide(dirs, &passport, &capability, &context, full, fail_open)
        }
        Command::Audit(AuditCmd::Verify { agent_id }) => audit_verify(dirs, &agent_id),
        Command::Audit(AuditCmd::Export { agent_id }) => audit_export(dirs, &agent_id),
        Command::Serve { config } => serve(config.as_deref()),
        Command::Sim(SimCmd::Replay { tier, n, seed, report, workers, scoped }) => {
            replay(tier, n, seed, report.as_deref(), workers, scoped)
        }
        Command::Sim(SimCmd::Bench { mode, n, out }) => run_bench(mode, n, out.as_deref()),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_ring(dirs: &Dirs) -> Result<Keyring, Failure> {
    Keyring::load(&dirs.keys).map_err(usage)
}

fn keygen(dirs: &Dirs, label: &str, rotate: bool) -> Result<u8, Failure> {
    let mut ring = load_ring(dirs)?;
    if rotate {
        let live: Vec<String> = ring.keys().iter().filter(|k| !k.retired).map(|k| k.key_id.clone()).collect();
        for id in live {
            ring.retire(&id).map_err(usage)?;
        }
    }
    let key_id = ring.generate_key(label, chrono::Utc::now()).map_err(usage)?.key_id.clone();
    ring.save(&dirs.keys).map_err(usage)?;
    println!("{key_id}");
    Ok(0)
}

fn issue(dirs: &Dirs, draft: &Path, out: Option<&Path>, register: bool) -> Result<u8, Failure> {
    let ring = load_ring(dirs)?;
    let key = ring
        .active_signer()
        .ok_or_else(|| usage(format!("no signing key in {}; run `oap keygen`", dirs.keys.display())))?;
    let mut passport = parse_passport(&read(draft)?).map_err(usage)?;
    if passport.issued_at.is_none() {
        let now = chrono::Utc::now();
        passport.issued_at = Some(now - chrono::Duration::nanoseconds(now.timestamp_subsec_nanos() as i64));
    }
    crypt::sign_passport(&mut passport, key).map_err(usage)?;
    if register {
        Registry::open(&dirs.registry).and_then(|r| r.insert(&passport)).map_err(usage)?;
    }
    let bytes = passport.serialize();
    match out {
        Some(path) => std::fs::write(path, bytes.as_bytes()).map_err(|e| usage(format!("{}: {e}", path.display())))?,
        None => println!("{}", String::from_utf8_lossy(bytes.as_bytes())),
    }
    Ok(0)
}

fn verify_passport(dirs: &Dirs, file: &Path) -> Result<u8, Failure> {
    let ring = load_ring(dirs)?;
    let bytes = read(file)?;
    let passport = parse_passport(&bytes).map_err(|e| Failure::Verify(format!("{}: {e}", file.display())))?;
    if crypt::verify_passport(&passport, &ring) {
        println!("ok {} {}", passport.agent_id, passport.status);
        Ok(0)
    } else {
        Err(Failure::Verify(format!("{}: signature does not verify", file.display())))
    }
}

fn set_status(dirs: &Dirs, agent_id: &str, status: &str) -> Result<u8, Failure> {
    let next = PassportStatus::parse(status)
        .ok_or_else(|| usage(format!("unknown status `{status}` (active, suspended, revoked)")))?;
    let ring = load_ring(dirs)?;
    let key = ring.active_signer().ok_or_else(|| usage("no signing key; run `oap keygen`"))?;
    let reg = Registry::open(&dirs.registry).map_err(usage)?;
    let current = reg
        .get(agent_id)
        .map_err(usage)?
        .ok_or_else(|| usage(format!("no passport for {agent_id}")))?;
    let updated = registry::transition(&current, next, key).map_err(usage)?;
    reg.replace(&updated).map_err(usage)?;
    println!("{agent_id} {} -> {next}", current.status);
    Ok(0)
}

fn lint(dir: &Path) -> Result<u8, Failure> {
    let findings = lint_pack_dir(dir).map_err(usage)?;
    for f in &findings {
        println!("{f}");
    }
    let errors = findings.iter().filter(|f| f.severity == Severity::Error).count();
    if errors > 0 {
        Err(Failure::Verify(format!("{errors} error(s)")))
    } else {
        Ok(0)
    }
}

fn library(dirs: &Dirs) -> Result<PackLibrary, Failure> {
    match &dirs.packs {
        Some(dir) => load_pack_library(dir).map_err(usage),
        None => Ok(PackLibrary::bundled()),
    }
}

fn decide(dirs: &Dirs, passport: &Path, capability: &str, context: &str, full: bool, fail_open: bool) -> Result<u8, Failure> {
    let passport = parse_passport(&read(passport)?).map_err(usage)?;
    let context_text = if context == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s).map_err(usage)?;
        s
    } else {
        context.to_owned()
    };
    let params = Value::parse(context_text.as_bytes())
        .map_err(usage)
        .and_then(|v| parse_params(v).map_err(usage))
        .map_err(|e| usage(format!("--context: {e}")))?;

    let keys = Arc::new(KeyringHandle::new(load_ring(dirs)?));
    let store = FileStore::open(&dirs.audit).map_err(usage)?;
    let audit = Arc::new(AuditLog::new(Arc::new(store), keys.clone(), WriteMode::Sync));
    let config = EngineConfig { fail_open: fail_open || EngineConfig::from_env().fail_open };
    let engine = Engine::new(keys, Arc::new(LibraryHandle::new(library(dirs)?)), audit).with_config(config);

    let call = ToolCall {
        capability_id: capability.to_owned(),
        params,
        agent_id: passport.agent_id.clone(),
        request_id: String::new(),
        received_at: engine.clock().now(),
    };
    let decision = engine.authorize(&call, &passport).map_err(usage)?.decision;
    if full {
        println!("{}", decision.to_canonical_string());
    } else {
        println!("{}", explain(&decision).to_canonical_string());
    }
    Ok(match decision.verdict {
        Verdict::Allow => 0,
        Verdict::Deny => 3,
        Verdict::Escalate => 4,
    })
}

fn audit_verify(dirs: &Dirs, agent_id: &str) -> Result<u8, Failure> {
    let ring = load_ring(dirs)?;
    let store = FileStore::open(&dirs.audit).map_err(usage)?;
    match audit::verify_chain(agent_id, &store, &ring) {
        Ok(()) => {
            let n = store.entries(agent_id).map_err(usage)?.len();
            println!("ok {agent_id} {n} entries");
            Ok(0)
        }
        Err(audit::VerifyError::Tampered(t)) => {
            Err(Failure::Verify(format!("tampered {agent_id} seq={} cause={}", t.seq, t.cause.as_str())))
        }
        Err(e) => Err(usage(e)),
    }
}

fn audit_export(dirs: &Dirs, agent_id: &str) -> Result<u8, Failure> {
    let store = FileStore::open(&dirs.audit).map_err(usage)?;
    for entry in store.entries(agent_id).map_err(usage)? {
        println!("{}", entry.to_canonical_string());
    }
    Ok(0)
}

fn serve(config: Option<&Path>) -> Result<u8, Failure> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let config = match config {
        Some(path) => ServiceConfig::load(path).map_err(usage)?,
        None => ServiceConfig::default(),
    };
    let service = Arc::new(Service::from_config(config).map_err(usage)?);
    let runtime = tokio::runtime::Runtime::new().map_err(usage)?;
    runtime.block_on(oap_service::serve(service)).map_err(usage)?;
    Ok(0)
}

fn replay(tier: Tier, n: usize, seed: u64, report: Option<&Path>, workers: usize, scoped: bool) -> Result<u8, Failure> {
    let mut corpus = simharness::generate_corpus(tier, n, seed).map_err(usage)?;
    if scoped {
        corpus = corpus.scoped();
    }
    let engine = EngineConfig::from_env();
    let outcome = simharness::replay(&corpus, ReplayConfig { workers, engine });
    let json = outcome.report.to_json();
    if let Some(path) = report {
        std::fs::write(path, format!("{json}\n")).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    println!("{json}");
    Ok(0)
}

fn run_bench(mode: BenchMode, n: usize, out: Option<&Path>) -> Result<u8, Failure> {
    let (samples, csv, server) = if mode == BenchMode::InProcess {
        let s = simharness::bench_in_process(n).map_err(usage)?;
        let csv = simharness::samples_csv(&s);
        (s, csv, None)
    } else {
        let s = bench::bench_api(mode, n).map_err(usage)?;
        let csv = bench::api_csv(&s);
        let server = simharness::percentiles(&s.server_ms).map_err(usage)?;
        (s.round_trip_ms, csv, Some(server))
    };
    let p = simharness::percentiles(&samples).map_err(usage)?;
    if let Some(path) = out {
        std::fs::write(path, csv).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    let mut summary = serde_json::json!({
        "mode": mode.as_str(),
        "n": p.n,
        "p50_ms": p.p50_ms,
        "p95_ms": p.p95_ms,
        "p99_ms": p.p99_ms,
    });
    if let Some(s) = server {
        summary["server"] = serde_json::json!({ "p50_ms": s.p50_ms, "p95_ms": s.p95_ms, "p99_ms": s.p99_ms });
    }
    println!("{summary}");
    Ok(0)
}
