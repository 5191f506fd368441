use std::sync::Arc;

use tokio::net::TcpListener;
use vitalgate::clock::{ScaledClock, SharedClock};
use vitalgate::config::load_patients;
use vitalgate::gateway::{Gateway, GatewayConfig};
use vitalgate::http;
use vitalgate::sms::{MockModem, ModemConnector, ModemScript, TcpModem};
use vitalgate::store::Store;
use vitalgate::wire::ApiMode;

use crate::{read_file, Failure, GatewayRunArgs};

/// `--modem` when given, otherwise an always-OK in-process mock.
pub fn connector(modem: Option<String>, clock: &SharedClock) -> Arc<dyn ModemConnector> {
    match modem {
        Some(addr) => Arc::new(TcpModem { addr }),
        None => Arc::new(MockModem::new(ModemScript::all_ok(), clock.clone())),
    }
}

async fn bind(addr: std::net::SocketAddr, what: &str) -> Result<TcpListener, Failure> {
    let l = TcpListener::bind(addr)
        .await
        .map_err(|e| Failure::Io(format!("{what} bind {addr}: {e}")))?;
    let local = l.local_addr().map_err(|e| Failure::Io(e.to_string()))?;
    eprintln!("{what} listening on {local}");
    Ok(l)
}

pub async fn run(a: GatewayRunArgs) -> Result<(), Failure> {
    if !(a.clock_accel.is_finite() && a.clock_accel >= 1.0) {
        return Err(Failure::Usage(format!("--clock-accel must be >= 1, got {}", a.clock_accel)));
    }
    let patients = load_patients(&read_file(&a.patients)?)?;
    let store = Store::open(&a.store, a.fsync)?;
    let ingest = bind(a.listen, "ingest").await?;
    let api = bind(a.http, "http").await?;

    let clock: SharedClock = Arc::new(ScaledClock::accelerated(a.clock_accel));
    if a.modem.is_none() {
        tracing::warn!("no --modem given; SMS goes to the built-in mock modem");
    }
    let modem = connector(a.modem, &clock);
    let cfg = GatewayConfig {
        mode: ApiMode::from_escaped(a.escaped),
        ..GatewayConfig::default()
    };
    tracing::info!(
        patients = patients.len(),
        readings = store.reading_count(),
        store = %a.store.display(),
        "gateway starting"
    );
    let gw = Gateway::start(cfg, patients, store, clock, modem);
    let router = http::router(gw.clone(), a.static_dir);
    tokio::select! {
        r = gw.serve_ingest(ingest) => r.map_err(|e| Failure::Io(format!("ingest: {e}"))),
        r = http::serve(api, router) => r.map_err(|e| Failure::Io(format!("http: {e}"))),
        _ = tokio::signal::ctrl_c() => {
            tracing::info!("shutting down");
            Ok(())
        }
    }
}
