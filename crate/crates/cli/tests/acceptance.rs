//! Acceptance criteria for the primary component. Prints one PASS/FAIL line
//! per criterion and exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeDelta, TimeZone, Utc};
use futures::StreamExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tokio::net::{TcpListener, TcpStream};

use vitalgate::clock::{ManualClock, ScaledClock, SharedClock};
use vitalgate::config::load_patients;
use vitalgate::gateway::{Gateway, GatewayConfig};
use vitalgate::model::{iso_ms, Alert, BreachedBound, Patient};
use vitalgate::sensors::{
    bpm_from_beats, detect_beats, lm35_celsius_from_millivolts, simulate_lm35, synth_ecg, synth_pulse_signal,
    Lm35Model,
};
use vitalgate::simulator::{load_scenario, run_scenario};
use vitalgate::sms::{Direction, MockModem, ModemScript};
use vitalgate::store::{FsyncPolicy, SeriesQuery, Store};
use vitalgate::wire::{
    compute_checksum, decode_stream, encode_frame, ApiFrame, ApiMode, DecodeEvent, FrameDecoder, Metric,
    TelemetryPayload,
};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

const BIN: &str = env!("CARGO_BIN_EXE_vitalgate");

const PATIENTS: &str = r#"
[[patient]]
patient_id = 1
display_name = "P001"
doctor_phone = "+15551234567"

[[patient]]
patient_id = 2
display_name = "P002"
doctor_phone = "+15551234568"

[[patient]]
patient_id = 3
display_name = "P003"
doctor_phone = "+15551234569"
"#;

const WARD: &str = r#"
duration = 120
rng_seed = 7
acceleration = 60

[[patient]]
patient_id = 1

[[patient]]
patient_id = 2

[[patient]]
patient_id = 3

[[episode]]
patient_id = 1
metric = "temperature"
start = 30
duration = 60
target_value = 39.5

[[episode]]
patient_id = 2
metric = "heart_rate"
start = 40
duration = 60
target_value = 130
"#;

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime")
}

// ---------------------------------------------------------------- codec

fn oracle_checksum(frame_data: &[u8]) -> u8 {
    let sum: u64 = frame_data.iter().map(|&b| u64::from(b)).sum();
    0xFF - (sum % 256) as u8
}

fn random_frame(rng: &mut ChaCha8Rng) -> ApiFrame {
    let len = rng.random_range(0..48);
    ApiFrame::new(rng.random::<u8>(), (0..len).map(|_| rng.random::<u8>()).collect::<Vec<_>>())
}

/// Frames, noise and corrupted frames in one stream.
fn fixture_stream(rng: &mut ChaCha8Rng, mode: ApiMode) -> Vec<u8> {
    let mut out = Vec::new();
    for _ in 0..rng.random_range(1..6) {
        match rng.random_range(0..10) {
            0 => out.extend((0..rng.random_range(1..6)).map(|_| rng.random::<u8>())),
            1 => {
                let mut f = encode_frame(&random_frame(rng), mode).unwrap();
                let last = f.len() - 1;
                f[last] = f[last].wrapping_add(1);
                out.extend(f);
            }
            2 => {
                let f = encode_frame(&random_frame(rng), mode).unwrap();
                out.extend_from_slice(&f[..rng.random_range(1..f.len())]);
            }
            _ => out.extend(encode_frame(&random_frame(rng), mode).unwrap()),
        }
    }
    out
}

fn events(chunks: &[&[u8]], mode: ApiMode) -> Vec<DecodeEvent> {
    let mut d = FrameDecoder::new(mode);
    let mut out = Vec::new();
    for c in chunks {
        d.feed(c);
        while let Some(e) = d.next_event() {
            out.push(e);
        }
    }
    out.extend(d.flush_noise().map(DecodeEvent::Error));
    out
}

fn codec_soundness() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DEC);
    for mode in [ApiMode::Unescaped, ApiMode::Escaped] {
        for i in 0..10_000 {
            let f = random_frame(&mut rng);
            let bytes = encode_frame(&f, mode).map_err(err)?;
            let out = decode_stream(&bytes, mode);
            ensure!(
                out.frames == [f.clone()] && out.errors.is_empty() && out.consumed == bytes.len(),
                "{mode:?} frame {i} did not round-trip: {f:?}"
            );
            let p = TelemetryPayload {
                patient_id: rng.random(),
                metric: Metric::ALL[rng.random_range(0..3)],
                sequence: rng.random(),
                raw_value: rng.random(),
            };
            ensure!(TelemetryPayload::decode(&p.encode()) == Ok(p), "payload {p:?} did not round-trip");
        }
    }
    for i in 0..10_000 {
        let len = rng.random_range(1..256);
        let data: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let got = compute_checksum(&data).map_err(err)?;
        ensure!(got == oracle_checksum(&data), "checksum {i}: {got:#04x} vs oracle {:#04x}", oracle_checksum(&data));
    }
    let mut splits = 0;
    for s in 0..100 {
        let mode = if s % 2 == 0 { ApiMode::Unescaped } else { ApiMode::Escaped };
        let stream = fixture_stream(&mut rng, mode);
        let whole = events(&[&stream], mode);
        for k in 0..=stream.len() {
            let (a, b) = stream.split_at(k);
            ensure!(events(&[a, b], mode) == whole, "stream {s} split at {k} decodes differently");
            splits += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2} s");
    Ok(format!("20000 frames, 20000 payloads, 10000 checksums, {splits} split points in {secs:.2} s"))
}

// ---------------------------------------------------------------- LM35

fn lm35_accuracy() -> Outcome {
    let mut worst: f64 = 1.0;
    for truth in [36.0, 38.5, 40.0] {
        let inside = (0..10_000u64)
            .filter(|&seed| {
                let mv = simulate_lm35(truth, seed).expect("in range");
                let c = lm35_celsius_from_millivolts(mv).expect("in range");
                (c - truth).abs() <= 0.4
            })
            .count();
        let frac = inside as f64 / 10_000.0;
        ensure!(frac >= 0.93, "{truth} C: only {:.2}% within 0.4 C", frac * 100.0);
        worst = worst.min(frac);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let exact = Lm35Model::noiseless();
    let mut max_err: f64 = 0.0;
    for _ in 0..10_000 {
        let t = rng.random_range(0.0..150.0);
        let mv = exact.simulate(t, 0).map_err(err)?;
        max_err = max_err.max((mv - 10.0 * t).abs() / 10.0);
        max_err = max_err.max((lm35_celsius_from_millivolts(mv).map_err(err)? - mv / 10.0).abs());
    }
    ensure!(max_err <= 1e-9, "conversion error {max_err:e}");
    Ok(format!("worst band coverage {:.2}%, conversion error {max_err:.1e}", worst * 100.0))
}

// ---------------------------------------------------------------- heart rate

/// Local maxima above mid-range, merged when closer than `min_gap` seconds.
fn oracle_r_peaks(samples: &[f64], rate: f64, min_gap: f64) -> usize {
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let level = (lo + hi) / 2.0;
    let gap = (min_gap * rate) as usize;
    let mut last: Option<usize> = None;
    let mut count = 0;
    for i in 1..samples.len() - 1 {
        if samples[i] > level && samples[i] >= samples[i - 1] && samples[i] > samples[i + 1] {
            if last.is_none_or(|p| i - p >= gap) {
                count += 1;
            }
            last = Some(i);
        }
    }
    count
}

fn heart_rate_loop() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for (i, bpm) in [40.0, 60.0, 80.0, 100.0, 140.0, 180.0].into_iter().enumerate() {
        for seed in 0..5u64 {
            let s = synth_pulse_signal(bpm, 30.0, 100.0, seed * 97 + i as u64).map_err(err)?;
            let got = bpm_from_beats(&detect_beats(&s)).map_err(err)?;
            ensure!((got - bpm).abs() <= 2.0, "bpm {bpm} seed {seed}: detected {got:.2}");
            worst = worst.max((got - bpm).abs());
        }
        let duration = 30.0;
        let ecg = synth_ecg(bpm, duration, 250.0, i as u64).map_err(err)?;
        let peaks = oracle_r_peaks(&ecg.samples, 250.0, 0.2) as i64;
        let expected = (bpm * duration / 60.0).round() as i64;
        ensure!((peaks - expected).abs() <= 1, "ecg {bpm} bpm: {peaks} R peaks, expected {expected}");
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 20.0, "took {secs:.2} s");
    Ok(format!("max error {worst:.2} BPM over 30 runs, R-peak counts within 1, {secs:.2} s"))
}

// ---------------------------------------------------------------- flow chart

fn expected_body(alert: &Alert, name: &str) -> String {
    let (label, unit) = match alert.metric {
        Metric::Temperature => ("TEMP", "C"),
        Metric::HeartRate => ("HR", "BPM"),
        Metric::Ecg => ("ECG", "mV"),
    };
    let bound = match alert.breached_bound {
        BreachedBound::High => "HIGH",
        BreachedBound::Low => "LOW",
    };
    format!(
        "ALERT {name} {label} {:.1}{unit} {bound} (limit {:.1}{unit}) {}",
        alert.observed_value,
        alert.limit,
        alert.created_at.format("%Y-%m-%dT%H:%M:%SZ")
    )
}

fn golden_dialogue(phone: &str, body: &str, reference: u16) -> Vec<(Direction, Vec<u8>)> {
    let mut body_bytes = body.as_bytes().to_vec();
    body_bytes.push(0x1A);
    vec![
        (Direction::ToModem, b"AT\r".to_vec()),
        (Direction::FromModem, b"\r\nOK\r\n".to_vec()),
        (Direction::ToModem, b"AT+CMGF=1\r".to_vec()),
        (Direction::FromModem, b"\r\nOK\r\n".to_vec()),
        (Direction::ToModem, format!("AT+CMGS=\"{phone}\"\r").into_bytes()),
        (Direction::FromModem, b"\r\n> ".to_vec()),
        (Direction::ToModem, body_bytes),
        (Direction::FromModem, format!("\r\n+CMGS: {reference}\r\n\r\nOK\r\n").into_bytes()),
    ]
}

async fn flow_chart() -> Outcome {
    let started = Instant::now();
    let scenario = load_scenario(WARD).map_err(err)?;
    let patients = load_patients(PATIENTS).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let store = Store::open(dir.path(), FsyncPolicy::Always).map_err(err)?;
    let clock: SharedClock = Arc::new(ScaledClock::accelerated(scenario.clock.factor()));
    let modem = MockModem::new(ModemScript::all_ok(), clock.clone());
    let gw = Gateway::start(GatewayConfig::default(), patients.clone(), store, clock, Arc::new(modem.clone()));
    let listener = TcpListener::bind("127.0.0.1:0").await.map_err(err)?;
    let addr = listener.local_addr().map_err(err)?;
    tokio::spawn(gw.clone().serve_ingest(listener));

    let mut conn = TcpStream::connect(addr).await.map_err(err)?;
    let report = run_scenario(&scenario, &mut conn).await.map_err(err)?;
    drop(conn);
    let deadline = Instant::now() + Duration::from_secs(10);
    while gw.reading_count() < report.readings.len() && Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    gw.sms_idle().await;
    let secs = started.elapsed().as_secs_f64();

    let emitted = report.readings.len();
    ensure!(
        emitted as u64 == scenario.expected_emissions(),
        "simulator reported {emitted} emissions, scenario implies {}",
        scenario.expected_emissions()
    );
    ensure!(gw.reading_count() == emitted, "stored {} readings, emitted {emitted}", gw.reading_count());
    let stored: BTreeMap<(u16, Metric, u16), f64> = gw
        .readings()
        .iter()
        .map(|r| ((r.patient_id, r.metric, r.sequence), r.value))
        .collect();
    for e in &report.readings {
        let got = stored.get(&(e.patient_id, e.metric, e.sequence));
        ensure!(got == Some(&e.value), "emitted {e:?} stored as {got:?}");
    }

    let alerts = gw.alerts(None);
    let keys: BTreeSet<_> = alerts.iter().map(|a| (a.patient_id, a.metric)).collect();
    ensure!(alerts.len() == 2, "{} alerts: {keys:?}", alerts.len());
    ensure!(
        keys == BTreeSet::from([(1, Metric::Temperature), (2, Metric::HeartRate)]),
        "alerts on {keys:?}"
    );
    for a in &alerts {
        let p = patients.iter().find(|p| p.patient_id == a.patient_id).unwrap();
        let t = &p.thresholds[&a.metric];
        ensure!(!(t.low..=t.high).contains(&a.observed_value), "alert {} on in-range value", a.alert_id);
    }

    let sessions = modem.sessions();
    ensure!(sessions.len() == 2, "{} modem sessions, expected 2", sessions.len());
    ensure!(modem.sent().len() == 2, "{} SMS accepted, expected 2", modem.sent().len());
    for (i, session) in sessions.iter().enumerate() {
        let reference = i as u16 + 1;
        let sent = &modem.sent()[i];
        let alert = alerts
            .iter()
            .find(|a| patients.iter().any(|p| p.patient_id == a.patient_id && p.doctor_phone == sent.phone))
            .ok_or_else(|| format!("SMS to {} matches no alert", sent.phone))?;
        let name = format!("P{:03}", alert.patient_id);
        let golden = golden_dialogue(&sent.phone, &expected_body(alert, &name), reference);
        ensure!(session.dialogue() == golden, "session {i} differs from the golden AT sequence");
    }
    ensure!(secs < 15.0, "took {secs:.2} s");
    Ok(format!("{emitted} readings stored of {emitted} emitted, 2 alerts, 2 golden SMS dialogues, {secs:.2} s"))
}

// ---------------------------------------------------------------- durability

struct GatewayProc {
    child: Child,
    ingest: String,
    http: String,
}

fn clean_command() -> Command {
    let mut c = Command::new(BIN);
    for (k, _) in std::env::vars() {
        if k.starts_with("VITALGATE_") {
            c.env_remove(k);
        }
    }
    c
}

fn spawn_gateway(store: &Path, patients: &Path) -> Result<GatewayProc, String> {
    let mut child = clean_command()
        .args(["gateway", "run", "--listen", "127.0.0.1:0", "--http", "127.0.0.1:0", "--clock-accel", "60"])
        .arg("--store")
        .arg(store)
        .arg("--patients")
        .arg(patients)
        .env("VITALGATE_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(err)?;
    let stderr = child.stderr.take().unwrap();
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(stderr).lines().map_while(Result::ok) {
            let _ = tx.send(line);
        }
    });
    let (mut ingest, mut http) = (None, None);
    while ingest.is_none() || http.is_none() {
        let line = rx
            .recv_timeout(Duration::from_secs(10))
            .map_err(|_| "gateway did not report its addresses".to_string())?;
        if let Some(a) = line.strip_prefix("ingest listening on ") {
            ingest = Some(a.to_string());
        } else if let Some(a) = line.strip_prefix("http listening on ") {
            http = Some(format!("http://{a}"));
        }
    }
    Ok(GatewayProc {
        child,
        ingest: ingest.unwrap(),
        http: http.unwrap(),
    })
}

fn wait_with_timeout(child: &mut Child, limit: Duration) -> Option<std::process::ExitStatus> {
    let deadline = Instant::now() + limit;
    while Instant::now() < deadline {
        if let Ok(Some(s)) = child.try_wait() {
            return Some(s);
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    let _ = child.kill();
    None
}

/// One `readings.log` line, split without the store's parser.
#[derive(Debug, Clone, PartialEq)]
struct LogRow {
    timestamp: String,
    patient_id: u16,
    metric: String,
    value: f64,
    sequence: u16,
    addr: u64,
}

fn brute_force_log(path: &Path) -> Result<Vec<LogRow>, String> {
    let text = std::fs::read_to_string(path).map_err(err)?;
    ensure!(text.is_empty() || text.ends_with('\n'), "log ends with a partial line");
    text.lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            ensure!(f.len() == 6, "bad log line {l:?}");
            Ok(LogRow {
                timestamp: f[0].to_string(),
                patient_id: f[1].parse().map_err(err)?,
                metric: f[2].to_string(),
                value: f[3].parse().map_err(err)?,
                sequence: f[4].parse().map_err(err)?,
                addr: u64::from_str_radix(f[5], 16).map_err(err)?,
            })
        })
        .collect()
}

fn row_from_json(v: &Value) -> Option<LogRow> {
    Some(LogRow {
        timestamp: v["timestamp"].as_str()?.to_string(),
        patient_id: v["patient_id"].as_u64()? as u16,
        metric: v["metric"].as_str()?.to_string(),
        value: v["value"].as_f64()?,
        sequence: v["sequence"].as_u64()? as u16,
        addr: v["source_addr64"].as_u64()?,
    })
}

/// Collects `reading` events as (position, row) until the stream ends.
async fn watch_stream(url: String, seen: Arc<Mutex<Vec<(u64, LogRow)>>>) {
    let Ok(resp) = reqwest::get(url).await else { return };
    let mut body = resp.bytes_stream();
    let mut buf = String::new();
    while let Some(Ok(chunk)) = body.next().await {
        buf.push_str(&String::from_utf8_lossy(&chunk));
        while let Some(end) = buf.find("\n\n") {
            let block: String = buf.drain(..end + 2).collect();
            let (mut ev, mut id, mut data) = ("", None, String::new());
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    ev = if v.trim() == "reading" { "reading" } else { "other" };
                } else if let Some(v) = line.strip_prefix("id:") {
                    id = v.trim().parse::<u64>().ok();
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push_str(v.trim_start());
                }
            }
            if ev != "reading" {
                continue;
            }
            let row = serde_json::from_str::<Value>(&data).ok().and_then(|v| row_from_json(&v["reading"]));
            if let (Some(id), Some(row)) = (id, row) {
                seen.lock().unwrap().push((id, row));
            }
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), String> {
    std::fs::write(path, text).map_err(err)
}

async fn status_readings(base: &str) -> Result<u64, String> {
    let v: Value = reqwest::get(format!("{base}/api/status"))
        .await
        .map_err(err)?
        .json()
        .await
        .map_err(err)?;
    v["readings"].as_u64().ok_or_else(|| "status has no readings count".to_string())
}

fn csv_rows(out: &[u8]) -> Result<Vec<LogRow>, String> {
    let text = String::from_utf8_lossy(out);
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ensure!(f.len() == 7, "bad CSV row {l:?}");
            Ok(LogRow {
                timestamp: f[0].to_string(),
                patient_id: f[1].parse().map_err(err)?,
                metric: f[2].to_string(),
                value: f[3].parse().map_err(err)?,
                sequence: f[5].parse().map_err(err)?,
                addr: u64::from_str_radix(f[6], 16).map_err(err)?,
            })
        })
        .collect()
}

async fn durability() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let store = dir.path().join("data");
    let patients = dir.path().join("patients.toml");
    write_file(&patients, PATIENTS)?;
    let long = dir.path().join("long.toml");
    write_file(&long, &WARD.replace("duration = 120", "duration = 900"))?;
    let short = dir.path().join("short.toml");
    let ward_patients = &WARD[WARD.find("[[patient]]").unwrap()..WARD.find("[[episode]]").unwrap()];
    write_file(&short, &format!("duration = 10\nrng_seed = 8\nacceleration = 60\n\n{ward_patients}"))?;
    let short_emissions = load_scenario(&std::fs::read_to_string(&short).map_err(err)?)
        .map_err(err)?
        .expected_emissions();

    let mut gw = spawn_gateway(&store, &patients)?;
    let seen = Arc::new(Mutex::new(Vec::new()));
    let watcher = tokio::spawn(watch_stream(format!("{}/api/stream", gw.http), seen.clone()));
    tokio::time::sleep(Duration::from_millis(200)).await;
    let mut sim = clean_command()
        .args(["sim", "run", "--connect", &gw.ingest])
        .arg("--scenario")
        .arg(&long)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(err)?;
    let deadline = Instant::now() + Duration::from_secs(20);
    while seen.lock().unwrap().len() < 150 && Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    gw.child.kill().map_err(err)?;
    gw.child.wait().map_err(err)?;
    let sim_status = wait_with_timeout(&mut sim, Duration::from_secs(10));
    let _ = tokio::time::timeout(Duration::from_secs(5), watcher).await;
    let acknowledged = seen.lock().unwrap().clone();
    ensure!(acknowledged.len() >= 150, "only {} readings streamed before the kill", acknowledged.len());
    ensure!(
        sim_status.is_some_and(|s| !s.success()),
        "simulator did not fail after the gateway died: {sim_status:?}"
    );

    let log = store.join("readings.log");
    let mut f = std::fs::OpenOptions::new().append(true).open(&log).map_err(err)?;
    f.write_all(b"2031-01-01T00:00:00.000Z\t1\ttempera").map_err(err)?;
    drop(f);

    let mut gw = spawn_gateway(&store, &patients)?;
    let rows = brute_force_log(&log)?;
    for (pos, r) in &acknowledged {
        ensure!(
            rows.get(*pos as usize) == Some(r),
            "streamed reading at position {pos} missing after restart: {r:?}, log has {:?}",
            rows.get(*pos as usize)
        );
    }
    let before = status_readings(&gw.http).await?;
    ensure!(before as usize == rows.len(), "restarted gateway reports {before} readings, log has {}", rows.len());
    let sim_ok = clean_command()
        .args(["sim", "run", "--connect", &gw.ingest])
        .arg("--scenario")
        .arg(&short)
        .stderr(Stdio::null())
        .status()
        .map_err(err)?;
    ensure!(sim_ok.success(), "second simulator run failed");
    let deadline = Instant::now() + Duration::from_secs(10);
    let mut after = before;
    while after < before + short_emissions && Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(50)).await;
        after = status_readings(&gw.http).await?;
    }
    ensure!(after == before + short_emissions, "after restart stored {} of {short_emissions}", after - before);
    gw.child.kill().map_err(err)?;
    gw.child.wait().map_err(err)?;

    let rows = brute_force_log(&log)?;
    let times: Vec<DateTime<Utc>> = rows
        .iter()
        .map(|r| DateTime::parse_from_rfc3339(&r.timestamp).map(|t| t.with_timezone(&Utc)))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let (lo, hi) = (*times.iter().min().unwrap(), *times.iter().max().unwrap());
    let span_ms = (hi - lo).num_milliseconds() + 2;
    let mut rng = ChaCha8Rng::seed_from_u64(524);
    let mut queries = 0;
    for patient in 1..=3u16 {
        for metric in ["temperature", "heart_rate"] {
            for k in 0..4 {
                let (from, to) = if k == 0 {
                    (lo, hi + TimeDelta::milliseconds(1))
                } else {
                    let a = lo + TimeDelta::milliseconds(rng.random_range(-1000..span_ms));
                    (a, a + TimeDelta::milliseconds(rng.random_range(0..span_ms)))
                };
                let out = clean_command()
                    .args(["store", "query", "--csv", "--patient", &patient.to_string(), "--metric", metric])
                    .arg("--store")
                    .arg(&store)
                    .args(["--from", &iso_ms::format(&from), "--to", &iso_ms::format(&to)])
                    .output()
                    .map_err(err)?;
                ensure!(out.status.success(), "store query failed: {}", String::from_utf8_lossy(&out.stderr));
                let expected: Vec<LogRow> = rows
                    .iter()
                    .zip(&times)
                    .filter(|(r, t)| r.patient_id == patient && r.metric == metric && **t >= from && **t < to)
                    .map(|(r, _)| r.clone())
                    .collect();
                ensure!(
                    csv_rows(&out.stdout)? == expected,
                    "store query for patient {patient} {metric} [{from}, {to}) disagrees with the log"
                );
                queries += 1;
            }
        }
    }
    Ok(format!(
        "{} streamed readings survived kill -9 and a torn tail, {} stored after restart, {queries} queries match the log",
        acknowledged.len(),
        rows.len()
    ))
}

// ---------------------------------------------------------------- API

async fn api_coherence() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let store = Store::open(dir.path(), FsyncPolicy::Never).map_err(err)?;
    let t0 = Utc.with_ymd_and_hms(2015, 6, 1, 10, 0, 0).unwrap();
    let manual = ManualClock::new(t0);
    let clock: SharedClock = Arc::new(manual.clone());
    let modem = MockModem::new(ModemScript::all_ok(), clock.clone());
    let cfg = GatewayConfig {
        send_sms: false,
        ..GatewayConfig::default()
    };
    let patients: Vec<Patient> = load_patients(PATIENTS).map_err(err)?;
    let gw = Gateway::start(cfg, patients, store, clock, Arc::new(modem));
    let listener = TcpListener::bind("127.0.0.1:0").await.map_err(err)?;
    let base = format!("http://{}", listener.local_addr().map_err(err)?);
    tokio::spawn(vitalgate::http::serve(listener, vitalgate::http::router(gw.clone(), None)));

    let scenario = load_scenario(WARD).map_err(err)?;
    for e in scenario.emissions() {
        manual.set(t0 + TimeDelta::milliseconds((e.reading.scenario_time_s * 1000.0).round() as i64));
        let frames = decode_stream(&e.bytes, ApiMode::Unescaped).frames;
        ensure!(frames.len() == 1, "emission did not decode");
        gw.ingest_frame(&frames[0]);
    }
    let readings = gw.readings();
    let client = reqwest::Client::new();
    let mut rng = ChaCha8Rng::seed_from_u64(525);
    let mut points = 0;
    for i in 0..50 {
        let patient = rng.random_range(1..=3u16);
        let metric = [Metric::Temperature, Metric::HeartRate][rng.random_range(0..2)];
        let from = t0 + TimeDelta::milliseconds(rng.random_range(-10_000..130_000));
        let to = from + TimeDelta::milliseconds(rng.random_range(0..140_000));
        let max_points = rng.random_bool(0.5).then(|| rng.random_range(2..80usize));
        let mut url = format!(
            "{base}/api/patients/{patient}/series?metric={}&from={}&to={}",
            metric.as_str(),
            iso_ms::format(&from),
            iso_ms::format(&to)
        );
        if let Some(n) = max_points {
            url.push_str(&format!("&max_points={n}"));
        }
        let resp = client.get(&url).send().await.map_err(err)?;
        ensure!(resp.status() == 200, "window {i}: status {}", resp.status());
        let got = resp.text().await.map_err(err)?;
        let q = SeriesQuery {
            patient_id: patient,
            metric,
            from,
            to,
            max_points,
        };
        let direct = Store::open_read_only(dir.path()).map_err(err)?.query_series(&q).map_err(err)?;
        ensure!(
            got == serde_json::to_string(&direct).map_err(err)?,
            "window {i}: /series differs from the store"
        );
        if max_points.is_none() {
            let brute: Vec<Value> = readings
                .iter()
                .filter(|r| r.patient_id == patient && r.metric == metric && r.timestamp >= from && r.timestamp < to)
                .map(|r| json!({"timestamp": iso_ms::format(&r.timestamp), "value": r.value}))
                .collect();
            let want = Value::Array(brute).to_string();
            ensure!(got == want, "window {i}: /series differs from a brute-force filter");
        }
        points += direct.len();
    }

    let alerts_for_3 = |v: &Value| v.as_array().map_or(0, |a| a.iter().filter(|x| x["patient_id"] == 3).count());
    let before: Value = client.get(format!("{base}/api/alerts")).send().await.map_err(err)?.json().await.map_err(err)?;
    ensure!(alerts_for_3(&before) == 0, "patient 3 already has alerts");
    let put = client
        .put(format!("{base}/api/patients/3/thresholds"))
        .json(&json!({"metric": "temperature", "low": 30.0, "high": 36.5}))
        .send()
        .await
        .map_err(err)?;
    ensure!(put.status() == 200, "PUT thresholds: {}", put.status());
    let next = scenario
        .emissions()
        .into_iter()
        .find(|e| e.reading.patient_id == 3 && e.reading.metric == Metric::Temperature && e.reading.value > 36.5)
        .ok_or("no patient 3 reading above 36.5")?;
    manual.set(t0 + TimeDelta::seconds(200));
    gw.ingest_frame(&decode_stream(&next.bytes, ApiMode::Unescaped).frames[0]);
    let after: Value = client.get(format!("{base}/api/alerts")).send().await.map_err(err)?.json().await.map_err(err)?;
    ensure!(alerts_for_3(&after) == 1, "no alert after the threshold edit and a breach");
    let id = after
        .as_array()
        .unwrap()
        .iter()
        .find(|x| x["patient_id"] == 3)
        .and_then(|x| x["alert_id"].as_u64())
        .ok_or("alert has no id")?;
    let ack = |client: reqwest::Client| {
        let url = format!("{base}/api/alerts/{id}/ack");
        async move { client.post(url).json(&json!({"operator": "nurse"})).send().await.map(|r| r.status().as_u16()) }
    };
    let first = ack(client.clone()).await.map_err(err)?;
    let second = ack(client.clone()).await.map_err(err)?;
    ensure!(first == 200 && second == 409, "double ack returned {first} then {second}");
    Ok(format!("50 windows ({points} points) match, threshold edit raised alert {id}, double ack 200/409"))
}

// ---------------------------------------------------------------- driver

fn main() {
    let rt = runtime();
    let criteria: Vec<Criterion> = vec![
        ("codec soundness", Box::new(codec_soundness)),
        ("LM35 accuracy band", Box::new(lm35_accuracy)),
        ("heart-rate closed loop", Box::new(heart_rate_loop)),
        ("flow-chart fidelity", Box::new(|| rt.block_on(flow_chart()))),
        ("durability", Box::new(|| rt.block_on(durability()))),
        ("API coherence", Box::new(|| rt.block_on(api_coherence()))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    let _ = std::io::stdout().flush();
    if failed > 0 {
        std::process::exit(1);
    }
}
