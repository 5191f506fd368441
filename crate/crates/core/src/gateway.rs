//! Coordinator-side pipeline.
//!
//! Frames come in over byte streams, are decoded and stamped, appended to the
//! store and checked against the patient's thresholds. A breach opens an
//! alert and queues an SMS job; a worker drives the modem dialogue and moves
//! the alert to Notified when the modem accepts the message.
//!
//! One mutex (`Pipeline`) serializes everything that changes alert or rule
//! state, so per-series evaluation order equals append order and the event
//! stream sees changes in the order they were made.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, watch};

use crate::clock::SharedClock;
use crate::model::{
    Alert, AlertId, AlertState, Patient, SensorReading, SmsStatus, TransitionError,
    ValidationError, VitalThresholds,
};
use crate::rules::{evaluate, Decision, RuleState};
use crate::sms::{format_alert_message, send_sms, ModemConnector, SendResult, SmsConfig};
use crate::store::{SeriesPoint, SeriesQuery, Store, StoreError};
use crate::wire::{ApiFrame, ApiMode, DecodeEvent, FrameDecoder, Metric, ReceivePacket, TelemetryPayload};

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub mode: ApiMode,
    pub sms: SmsConfig,
    /// Capacity of the SMS job queue.
    pub sms_queue: usize,
    /// Per-subscriber event buffer; subscribers that fall further behind are
    /// dropped.
    pub event_buffer: usize,
    /// When false, breaches are recorded as alerts but no SMS is sent.
    pub send_sms: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            mode: ApiMode::Unescaped,
            sms: SmsConfig::default(),
            sms_queue: 64,
            event_buffer: 4096,
            send_sms: true,
        }
    }
}

/// Change notifications, in the order the changes were made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Reading { position: u64, reading: SensorReading },
    Alert { alert: Alert },
}

#[derive(Debug, Default)]
struct Counters {
    connections: AtomicU64,
    frames_decoded: AtomicU64,
    decode_errors: AtomicU64,
    payload_errors: AtomicU64,
    unknown_patient: AtomicU64,
    readings_stored: AtomicU64,
    storage_errors: AtomicU64,
    alerts_raised: AtomicU64,
    sms_sent: AtomicU64,
    sms_failed: AtomicU64,
}

/// Point-in-time copy of the pipeline counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub connections: u64,
    pub frames_decoded: u64,
    pub decode_errors: u64,
    pub payload_errors: u64,
    pub unknown_patient: u64,
    pub readings_stored: u64,
    pub storage_errors: u64,
    pub alerts_raised: u64,
    pub sms_sent: u64,
    pub sms_failed: u64,
}

impl Counters {
    fn bump(c: &AtomicU64) {
        c.fetch_add(1, Ordering::Relaxed);
    }

    fn snapshot(&self) -> CounterSnapshot {
        let g = |c: &AtomicU64| c.load(Ordering::Relaxed);
        CounterSnapshot {
            connections: g(&self.connections),
            frames_decoded: g(&self.frames_decoded),
            decode_errors: g(&self.decode_errors),
            payload_errors: g(&self.payload_errors),
            unknown_patient: g(&self.unknown_patient),
            readings_stored: g(&self.readings_stored),
            storage_errors: g(&self.storage_errors),
            alerts_raised: g(&self.alerts_raised),
            sms_sent: g(&self.sms_sent),
            sms_failed: g(&self.sms_failed),
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{what} {id} not found")]
    NotFound { what: &'static str, id: u64 },
    #[error(transparent)]
    Conflict(#[from] TransitionError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// What became of one frame.
#[derive(Debug, Clone, PartialEq)]
pub enum IngestOutcome {
    Stored {
        position: u64,
        decision: Option<Decision>,
    },
    /// Evaluated but the store append failed.
    NotStored { decision: Option<Decision> },
    BadPayload,
    UnknownPatient(u16),
}

type SeriesKey = (u16, Metric);

#[derive(Debug, Default)]
struct Pipeline {
    rules: HashMap<SeriesKey, RuleState>,
    active: HashMap<SeriesKey, AlertId>,
}

#[derive(Debug)]
struct SmsJob {
    alert_id: AlertId,
}

struct Inner {
    cfg: GatewayConfig,
    clock: SharedClock,
    patients: RwLock<BTreeMap<u16, Patient>>,
    store: RwLock<Store>,
    pipeline: Mutex<Pipeline>,
    counters: Counters,
    events: broadcast::Sender<Event>,
    sms_tx: mpsc::Sender<SmsJob>,
    // number of SMS jobs queued or in flight
    sms_busy: watch::Sender<usize>,
}

/// Cheap-to-clone handle on a running gateway.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").finish_non_exhaustive()
    }
}

impl Gateway {
    /// Starts the gateway and its SMS worker on the current tokio runtime.
    ///
    /// Rule state is rebuilt from alerts that are still active in the store,
    /// and alerts whose SMS never completed are queued again.
    pub fn start(
        cfg: GatewayConfig,
        patients: Vec<Patient>,
        mut store: Store,
        clock: SharedClock,
        modem: Arc<dyn ModemConnector>,
    ) -> Self {
        let mut pipeline = Pipeline::default();
        let mut resend = Vec::new();
        for a in store.alerts() {
            let key = (a.patient_id, a.metric);
            let st = pipeline.rules.entry(key).or_default();
            if st.last_alert_at.is_none_or(|t| t < a.created_at) {
                st.last_alert_at = Some(a.created_at);
            }
            if a.is_active() {
                st.alert_open = true;
                pipeline.active.insert(key, a.alert_id);
            }
            if a.state == AlertState::Open && a.sms_status != SmsStatus::Sent && cfg.send_sms {
                resend.push(a.alert_id);
            }
        }
        for p in &patients {
            store.register_patient(p.patient_id);
        }
        let (events, _) = broadcast::channel(cfg.event_buffer.max(1));
        let (sms_tx, sms_rx) = mpsc::channel(cfg.sms_queue.max(1));
        let (sms_busy, _) = watch::channel(0usize);
        let inner = Arc::new(Inner {
            cfg,
            clock,
            patients: RwLock::new(patients.into_iter().map(|p| (p.patient_id, p)).collect()),
            store: RwLock::new(store),
            pipeline: Mutex::new(pipeline),
            counters: Counters::default(),
            events,
            sms_tx,
            sms_busy,
        });
        let gw = Gateway { inner };
        tokio::spawn(sms_worker(gw.clone(), sms_rx, modem));
        for alert_id in resend {
            gw.enqueue_sms(alert_id);
        }
        gw
    }

    pub fn clock(&self) -> &SharedClock {
        &self.inner.clock
    }

    pub fn mode(&self) -> ApiMode {
        self.inner.cfg.mode
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.inner.counters.snapshot()
    }

    pub fn patients(&self) -> Vec<Patient> {
        self.inner.patients.read().expect("patients lock").values().cloned().collect()
    }

    pub fn patient(&self, id: u16) -> Option<Patient> {
        self.inner.patients.read().expect("patients lock").get(&id).cloned()
    }

    /// Registered, or seen in the store.
    pub fn knows_patient(&self, id: u16) -> bool {
        self.patient(id).is_some() || self.store().knows_patient(id)
    }

    fn store(&self) -> std::sync::RwLockReadGuard<'_, Store> {
        self.inner.store.read().expect("store lock")
    }

    pub fn reading_count(&self) -> usize {
        self.store().reading_count()
    }

    pub fn readings(&self) -> Vec<SensorReading> {
        self.store().readings().to_vec()
    }

    pub fn latest(&self, patient_id: u16) -> Result<BTreeMap<Metric, SensorReading>, GatewayError> {
        if !self.knows_patient(patient_id) {
            return Err(GatewayError::NotFound {
                what: "patient",
                id: patient_id.into(),
            });
        }
        Ok(self.store().latest(patient_id))
    }

    pub fn query_series(&self, q: &SeriesQuery) -> Result<Vec<SeriesPoint>, GatewayError> {
        if !self.knows_patient(q.patient_id) {
            return Err(GatewayError::NotFound {
                what: "patient",
                id: q.patient_id.into(),
            });
        }
        Ok(self.store().query_series(q)?)
    }

    pub fn alerts(&self, state: Option<AlertState>) -> Vec<Alert> {
        self.store()
            .alerts()
            .filter(|a| state.is_none_or(|s| a.state == s))
            .cloned()
            .collect()
    }

    pub fn alert(&self, id: AlertId) -> Option<Alert> {
        self.store().alert(id).cloned()
    }

    /// Subscribes to the event stream. Readings stored after position
    /// `after` are returned first so a reconnecting client misses nothing.
    pub fn subscribe(&self, after: Option<u64>) -> (Vec<Event>, broadcast::Receiver<Event>) {
        let _pipeline = self.inner.pipeline.lock().expect("pipeline lock");
        let rx = self.inner.events.subscribe();
        let backlog = match after {
            None => Vec::new(),
            Some(pos) => {
                let store = self.store();
                store
                    .readings()
                    .iter()
                    .enumerate()
                    .skip(pos.saturating_add(1) as usize)
                    .map(|(i, r)| Event::Reading {
                        position: i as u64,
                        reading: r.clone(),
                    })
                    .collect()
            }
        };
        (backlog, rx)
    }

    fn emit(&self, e: Event) {
        // no subscribers is fine
        let _ = self.inner.events.send(e);
    }

    /// Replaces one metric's thresholds; used from the next evaluation on.
    pub fn set_thresholds(&self, patient_id: u16, t: VitalThresholds) -> Result<Patient, GatewayError> {
        if !t.metric.is_monitored() {
            return Err(ValidationError::new("metric", format!("{} is not range-checked", t.metric.as_str())).into());
        }
        t.validate()?;
        let mut patients = self.inner.patients.write().expect("patients lock");
        let p = patients.get_mut(&patient_id).ok_or(GatewayError::NotFound {
            what: "patient",
            id: patient_id.into(),
        })?;
        tracing::info!(patient_id, metric = t.metric.as_str(), low = t.low, high = t.high, "thresholds updated");
        p.thresholds.insert(t.metric, t);
        Ok(p.clone())
    }

    /// Decodes and ingests one API frame.
    pub fn ingest_frame(&self, frame: &ApiFrame) -> IngestOutcome {
        let c = &self.inner.counters;
        Counters::bump(&c.frames_decoded);
        let decoded = ReceivePacket::from_frame(frame).and_then(|rx| {
            let p = TelemetryPayload::decode(&rx.rf_data)?;
            Ok((rx, p))
        });
        let (rx, payload) = match decoded {
            Ok(v) => v,
            Err(e) => {
                Counters::bump(&c.payload_errors);
                tracing::warn!(error = %e, frame_type = frame.frame_type, "payload rejected");
                return IngestOutcome::BadPayload;
            }
        };
        if self.patient(payload.patient_id).is_none() {
            Counters::bump(&c.unknown_patient);
            tracing::warn!(patient_id = payload.patient_id, "reading for unregistered patient");
            return IngestOutcome::UnknownPatient(payload.patient_id);
        }
        let reading = SensorReading {
            patient_id: payload.patient_id,
            metric: payload.metric,
            value: payload.value(),
            unit: payload.metric.unit(),
            timestamp: self.inner.clock.now(),
            sequence: payload.sequence,
            source_addr64: rx.source_addr64,
        };
        self.ingest_reading(reading, true)
    }

    /// Appends (when `store` is set) and evaluates an already-stamped reading.
    pub fn ingest_reading(&self, reading: SensorReading, store: bool) -> IngestOutcome {
        let c = &self.inner.counters;
        let mut pipeline = self.inner.pipeline.lock().expect("pipeline lock");
        let position = if store {
            let res = self.inner.store.write().expect("store lock").append_reading(&reading);
            match res {
                Ok(pos) => {
                    Counters::bump(&c.readings_stored);
                    self.emit(Event::Reading {
                        position: pos,
                        reading: reading.clone(),
                    });
                    Some(pos)
                }
                Err(e) => {
                    Counters::bump(&c.storage_errors);
                    tracing::error!(error = %e, "reading not stored");
                    None
                }
            }
        } else {
            None
        };
        let decision = self.evaluate_locked(&mut pipeline, &reading);
        match position {
            Some(position) => IngestOutcome::Stored { position, decision },
            None => IngestOutcome::NotStored { decision },
        }
    }

    fn evaluate_locked(&self, pipeline: &mut Pipeline, reading: &SensorReading) -> Option<Decision> {
        if !reading.metric.is_monitored() {
            return None;
        }
        let patient = self.patient(reading.patient_id)?;
        let thresholds = patient.thresholds.get(&reading.metric)?;
        let key = (reading.patient_id, reading.metric);
        let state = pipeline.rules.entry(key).or_default();
        let decision = match evaluate(reading, thresholds, state) {
            Ok(d) => d,
            Err(e) => {
                tracing::error!(error = %e, "evaluation skipped");
                return None;
            }
        };
        match decision {
            Decision::NewAlert { bound, limit } => {
                let alert = {
                    let mut store = self.inner.store.write().expect("store lock");
                    let alert = Alert::open(store.next_alert_id(), reading, bound, limit);
                    if let Err(e) = store.put_alert(&alert) {
                        Counters::bump(&self.inner.counters.storage_errors);
                        tracing::error!(error = %e, "alert not persisted");
                    }
                    alert
                };
                Counters::bump(&self.inner.counters.alerts_raised);
                tracing::info!(
                    alert_id = alert.alert_id,
                    patient_id = alert.patient_id,
                    metric = alert.metric.as_str(),
                    value = alert.observed_value,
                    bound = %alert.breached_bound,
                    "alert opened"
                );
                pipeline.active.insert(key, alert.alert_id);
                let id = alert.alert_id;
                self.emit(Event::Alert { alert });
                if self.inner.cfg.send_sms {
                    self.enqueue_sms(id);
                }
            }
            Decision::ResolvesAlert => {
                if let Some(id) = pipeline.active.remove(&key) {
                    let now = reading.timestamp;
                    self.update_alert(id, |a| {
                        a.resolve_pending = true;
                        a.apply_pending_resolution(now);
                        Ok(())
                    })
                    .ok();
                }
            }
            Decision::Normal | Decision::SuppressedDuplicate { .. } => {}
        }
        Some(decision)
    }

    /// Applies `f` to a stored alert, persists the new snapshot and emits it.
    /// Callers hold the pipeline lock.
    fn update_alert(
        &self,
        id: AlertId,
        f: impl FnOnce(&mut Alert) -> Result<(), GatewayError>,
    ) -> Result<Alert, GatewayError> {
        let mut store = self.inner.store.write().expect("store lock");
        let mut alert = store
            .alert(id)
            .cloned()
            .ok_or(GatewayError::NotFound { what: "alert", id })?;
        let before = alert.state;
        f(&mut alert)?;
        store.put_alert(&alert)?;
        drop(store);
        if alert.state != before {
            tracing::info!(alert_id = id, from = before.as_str(), to = alert.state.as_str(), "alert transition");
        }
        self.emit(Event::Alert { alert: alert.clone() });
        Ok(alert)
    }

    pub fn acknowledge(&self, id: AlertId, operator: &str) -> Result<Alert, GatewayError> {
        let _pipeline = self.inner.pipeline.lock().expect("pipeline lock");
        let now = self.inner.clock.now();
        self.update_alert(id, |a| {
            a.transition(AlertState::Acknowledged, now)?;
            a.acknowledged_by = Some(operator.to_string());
            a.acknowledged_at = Some(now);
            a.apply_pending_resolution(now);
            Ok(())
        })
    }

    fn enqueue_sms(&self, alert_id: AlertId) {
        self.inner.sms_busy.send_modify(|n| *n += 1);
        match self.inner.sms_tx.try_send(SmsJob { alert_id }) {
            Ok(()) => {}
            Err(mpsc::error::TrySendError::Full(job)) => {
                tracing::warn!(alert_id, "sms queue full; retrying when space frees up");
                let _ = self.update_alert(alert_id, |a| {
                    a.sms_status = SmsStatus::Failed { attempts: 0 };
                    Ok(())
                });
                let tx = self.inner.sms_tx.clone();
                tokio::spawn(async move {
                    let _ = tx.send(job).await;
                });
            }
            Err(mpsc::error::TrySendError::Closed(_)) => {
                self.inner.sms_busy.send_modify(|n| *n -= 1);
            }
        }
    }

    /// Resolves once no SMS job is queued or in flight.
    pub async fn sms_idle(&self) {
        let mut rx = self.inner.sms_busy.subscribe();
        let _ = rx.wait_for(|n| *n == 0).await;
    }

    async fn run_sms_job(&self, job: SmsJob, modem: &dyn ModemConnector) {
        let Some(alert) = self.alert(job.alert_id) else {
            return;
        };
        let Some(patient) = self.patient(alert.patient_id) else {
            return;
        };
        let body = format_alert_message(&alert, &patient);
        let cfg = &self.inner.cfg.sms;
        let clock = self.inner.clock.clone();

        let mut conn = None;
        for attempt in 1..=cfg.max_attempts.max(1) {
            match modem.connect().await {
                Ok(c) => {
                    conn = Some(c);
                    break;
                }
                Err(e) => {
                    tracing::warn!(alert_id = alert.alert_id, attempt, error = %e, "modem connect failed");
                    if attempt < cfg.max_attempts {
                        tokio::time::sleep(clock.wall(cfg.initial_backoff * 2u32.pow(attempt - 1))).await;
                    }
                }
            }
        }
        let outcome = match conn {
            Some(mut c) => send_sms(&patient.doctor_phone, &body, &mut c, clock.as_ref(), cfg)
                .await
                .map_err(|e| {
                    tracing::error!(alert_id = alert.alert_id, error = %e, "sms rejected");
                    0
                }),
            None => Err(cfg.max_attempts.max(1)),
        };

        let _pipeline = self.inner.pipeline.lock().expect("pipeline lock");
        let now = self.inner.clock.now();
        let res = self.update_alert(alert.alert_id, |a| {
            match outcome {
                Ok(out) => {
                    a.transcript = Some(out.transcript);
                    match out.result {
                        SendResult::Sent { reference } => {
                            tracing::info!(alert_id = a.alert_id, reference, "sms sent");
                            a.sms_status = SmsStatus::Sent;
                            if a.state == AlertState::Open {
                                a.transition(AlertState::Notified, now)?;
                            }
                            a.apply_pending_resolution(now);
                        }
                        SendResult::Failed { stage, attempts } => {
                            tracing::warn!(alert_id = a.alert_id, %stage, attempts, "sms failed");
                            a.sms_status = SmsStatus::Failed { attempts };
                        }
                    }
                }
                Err(attempts) => a.sms_status = SmsStatus::Failed { attempts },
            }
            Ok(())
        });
        match res {
            Ok(a) if a.sms_status == SmsStatus::Sent => Counters::bump(&self.inner.counters.sms_sent),
            _ => Counters::bump(&self.inner.counters.sms_failed),
        }
    }

    /// Decodes frames from `stream` until it ends. Decode errors are counted
    /// and logged; the stream keeps going.
    pub async fn ingest_stream<R: AsyncRead + Unpin>(&self, mut stream: R) -> io::Result<()> {
        Counters::bump(&self.inner.counters.connections);
        let mut decoder = FrameDecoder::new(self.inner.cfg.mode);
        let mut buf = vec![0u8; 8192];
        loop {
            let n = stream.read(&mut buf).await?;
            if n == 0 {
                decoder.flush_noise();
                self.drain(&mut decoder);
                return Ok(());
            }
            decoder.feed(&buf[..n]);
            self.drain(&mut decoder);
        }
    }

    fn drain(&self, decoder: &mut FrameDecoder) {
        while let Some(ev) = decoder.next_event() {
            match ev {
                DecodeEvent::Frame(f) => {
                    self.ingest_frame(&f);
                }
                DecodeEvent::Error(e) => {
                    Counters::bump(&self.inner.counters.decode_errors);
                    tracing::warn!(error = %e, "frame decode error");
                }
            }
        }
    }

    /// Accepts node connections forever, one task per connection.
    pub async fn serve_ingest(self, listener: TcpListener) -> io::Result<()> {
        loop {
            let (sock, peer) = listener.accept().await?;
            let gw = self.clone();
            tokio::spawn(async move {
                tracing::info!(%peer, "node connected");
                match gw.ingest_stream(sock).await {
                    Ok(()) => tracing::info!(%peer, "node disconnected"),
                    Err(e) => tracing::warn!(%peer, error = %e, "node stream error"),
                }
            });
        }
    }
}

async fn sms_worker(gw: Gateway, mut rx: mpsc::Receiver<SmsJob>, modem: Arc<dyn ModemConnector>) {
    while let Some(job) = rx.recv().await {
        gw.run_sms_job(job, modem.as_ref()).await;
        gw.inner.sms_busy.send_modify(|n| *n = n.saturating_sub(1));
    }
}
