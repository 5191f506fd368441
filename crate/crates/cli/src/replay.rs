use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use tokio::time::Instant;
use vitalgate::clock::{ManualClock, SharedClock};
use vitalgate::config::load_patients;
use vitalgate::gateway::{Gateway, GatewayConfig, IngestOutcome};
use vitalgate::model::{iso_ms, Patient};
use vitalgate::rules::Decision;
use vitalgate::store::{FsyncPolicy, Store, READINGS_FILE};

use crate::export::{parse_any, CsvWriter};
use crate::gateway::connector;
use crate::{read_file, Failure, ReplayArgs};

pub async fn run(a: ReplayArgs) -> Result<(), Failure> {
    if !(a.speed.is_finite() && a.speed > 0.0) {
        return Err(Failure::Usage(format!("--speed must be a positive number, got {}", a.speed)));
    }
    if a.live_alerts && a.patients.is_none() {
        return Err(Failure::Usage("--live-alerts needs --patients for the doctor phone numbers".into()));
    }
    let path = if a.log.is_dir() { a.log.join(READINGS_FILE) } else { a.log.clone() };
    let readings = parse_any(&read_file(&path)?)?;
    let patients = match &a.patients {
        Some(p) => load_patients(&read_file(p)?)?,
        None => readings
            .iter()
            .map(|r| r.patient_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|id| Patient::new(id, format!("Patient {id}"), "+10000000000"))
            .collect(),
    };
    let Some(first) = readings.first() else { return Ok(()) };

    let scratch = tempfile::tempdir().map_err(|e| Failure::Io(format!("scratch store: {e}")))?;
    let store = Store::open(scratch.path(), FsyncPolicy::Never)?;
    let manual = ManualClock::new(first.timestamp);
    let clock: SharedClock = Arc::new(manual.clone());
    let cfg = GatewayConfig {
        send_sms: a.live_alerts,
        ..GatewayConfig::default()
    };
    let modem = connector(a.modem.clone(), &clock);
    let gw = Gateway::start(cfg, patients, store, clock, modem);

    let t0 = first.timestamp;
    let started = Instant::now();
    let mut out = CsvWriter::new(std::io::stdout().lock());
    for r in readings {
        let offset = (r.timestamp - t0).to_std().unwrap_or(Duration::ZERO);
        tokio::time::sleep_until(started + offset.div_f64(a.speed)).await;
        manual.set(r.timestamp);
        let outcome = gw.ingest_reading(r.clone(), false);
        if let IngestOutcome::NotStored {
            decision: Some(Decision::NewAlert { bound, limit }),
        } = outcome
        {
            eprintln!(
                "alert: patient {} {} {} {} (limit {}) at {}",
                r.patient_id,
                r.metric.as_str(),
                r.value,
                bound,
                limit,
                iso_ms::format(&r.timestamp)
            );
        }
        out.write(&r)?;
        out.flush()?;
    }
    if a.live_alerts {
        gw.sms_idle().await;
        for alert in gw.alerts(None) {
            eprintln!("alert {}: sms {:?}", alert.alert_id, alert.sms_status);
        }
    }
    Ok(())
}
