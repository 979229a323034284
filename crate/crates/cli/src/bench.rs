//! HTTP-mode latency runs against an in-process server.

use std::sync::Arc;
use std::time::{Duration, Instant};

use oap_core::crypt;
use oap_core::simharness::{self, BenchMode, SimError, BENCH_CAPABILITY, BENCH_CONTEXT, WARMUP_CALLS};
use oap_core::Value;
use oap_service::{verify_request, BackgroundServer, Service, ServiceConfig, PROCESSING_HEADER};

pub struct ApiSamples {
    /// Client-observed round trip, milliseconds.
    pub round_trip_ms: Vec<f64>,
    /// Handler time reported by the server, milliseconds.
    pub server_ms: Vec<f64>,
}

pub fn bench_api(mode: BenchMode, n: usize) -> Result<ApiSamples, SimError> {
    if n == 0 {
        return Err(SimError::NoSamples);
    }
    let unreachable = |e: &dyn std::fmt::Display| SimError::ServiceUnreachable(e.to_string());
    let config = ServiceConfig { listen: "127.0.0.1:0".into(), ..ServiceConfig::default() };
    let service = Arc::new(Service::from_config(config).map_err(|e| unreachable(&e))?);

    let mut passport = simharness::bench_passport();
    {
        let ring = service.engine().keys().snapshot();
        let key = ring.active_signer().ok_or_else(|| unreachable(&"service has no signing key"))?;
        crypt::sign_passport(&mut passport, key).map_err(|e| unreachable(&e))?;
    }
    service.registry().insert(&passport).map_err(|e| unreachable(&e))?;

    let server = BackgroundServer::start(service, "127.0.0.1:0").map_err(|e| unreachable(&e))?;
    let context = Value::parse(BENCH_CONTEXT.as_bytes()).expect("bench context parses");
    let (path, body) = verify_request(mode, &passport, BENCH_CAPABILITY, &context)
        .ok_or_else(|| unreachable(&"in_process mode has no HTTP form"))?;
    let url = format!("{}{path}", server.base_url());
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(10))
        .build()
        .map_err(|e| unreachable(&e))?;

    let call = || -> Result<f64, SimError> {
        let resp = client
            .post(&url)
            .header("content-type", "application/json")
            .body(body.clone())
            .send()
            .map_err(|e| unreachable(&e))?;
        if !resp.status().is_success() {
            return Err(unreachable(&format!("status {}", resp.status())));
        }
        let server_us: f64 = resp
            .headers()
            .get(PROCESSING_HEADER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok())
            .unwrap_or(f64::NAN);
        resp.bytes().map_err(|e| unreachable(&e))?;
        Ok(server_us / 1e3)
    };

    for _ in 0..WARMUP_CALLS {
        call()?;
    }
    let mut samples = ApiSamples { round_trip_ms: Vec::with_capacity(n), server_ms: Vec::with_capacity(n) };
    for _ in 0..n {
        let t = Instant::now();
        let server = call()?;
        samples.round_trip_ms.push(t.elapsed().as_secs_f64() * 1e3);
        samples.server_ms.push(server);
    }
    Ok(samples)
}

pub fn api_csv(samples: &ApiSamples) -> String {
    let mut out = String::from("index,millis,server_millis\n");
    for (i, (rt, srv)) in samples.round_trip_ms.iter().zip(&samples.server_ms).enumerate() {
        out.push_str(&format!("{i},{rt:.6},{srv:.6}\n"));
    }
    out
}
