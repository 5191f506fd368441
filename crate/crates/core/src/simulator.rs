//! Scripted fleet of virtual sensor nodes.
//!
//! A scenario lists patients with baselines and report intervals, plus
//! episodes that push one metric towards a target value for a while. Every
//! report interval each patient's node samples each configured metric through
//! the sensor models and sends one 0x90 frame carrying a telemetry payload.

use std::collections::BTreeSet;
use std::fmt;
use std::io;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tokio::io::{AsyncWrite, AsyncWriteExt};
use tokio::time::Instant;
use toml::Spanned;

use crate::config::ConfigError;
use crate::sensors::{
    bpm_from_beats, detect_beats, lm35_celsius_from_millivolts, synth_pulse_signal, EcgModel,
    Lm35Model, LM35_MAX_MV, LM35_MV_PER_C, MAX_BPM, MIN_BPM,
};
use crate::wire::{encode_frame, ApiMode, Metric, ReceivePacket, TelemetryPayload};

pub const DEFAULT_REPORT_INTERVAL_S: f64 = 1.0;
pub const DEFAULT_BASELINE_TEMP: f64 = 37.0;
pub const DEFAULT_BASELINE_BPM: f64 = 72.0;
/// Share of an episode spent ramping in, and again ramping out.
pub const EPISODE_RAMP_FRACTION: f64 = 0.1;
/// Pulse window the node analyses for each heart-rate report.
pub const PULSE_WINDOW_S: f64 = 8.0;
pub const PULSE_SAMPLE_RATE: f64 = 50.0;
/// XBee OUI prefix used for simulated node addresses.
pub const NODE_ADDR_PREFIX: u64 = 0x0013_A200_0000_0000;

pub fn node_addr64(patient_id: u16) -> u64 {
    NODE_ADDR_PREFIX | u64::from(patient_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSpec {
    pub patient_id: u16,
    pub baseline_temp: f64,
    pub baseline_bpm: f64,
    pub report_interval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub patient_id: u16,
    pub metric: Metric,
    pub start: f64,
    pub duration: f64,
    pub target_value: f64,
}

impl Episode {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    /// Ramp in over the first tenth, hold, ramp out over the last tenth.
    /// Returns `None` outside the episode.
    pub fn value_at(&self, t: f64, baseline: f64) -> Option<f64> {
        if t < self.start || t > self.end() {
            return None;
        }
        let ramp = self.duration * EPISODE_RAMP_FRACTION;
        let frac = if ramp <= 0.0 {
            1.0
        } else {
            ((t - self.start) / ramp).min((self.end() - t) / ramp).min(1.0)
        };
        Some(baseline + (self.target_value - baseline) * frac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    RealTime,
    Accelerated(f64),
}

impl ClockMode {
    pub fn factor(self) -> f64 {
        match self {
            ClockMode::RealTime => 1.0,
            ClockMode::Accelerated(k) => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Simulated seconds.
    pub duration: f64,
    pub patients: Vec<PatientSpec>,
    pub episodes: Vec<Episode>,
    pub clock: ClockMode,
    pub rng_seed: u64,
    pub metrics: Vec<Metric>,
    /// Heart-rate readings before this many seconds are flagged unreliable.
    pub warmup: f64,
    pub escaped: bool,
    /// Human-readable list of the defaults the loader filled in.
    #[serde(skip)]
    pub defaults_applied: Vec<String>,
}

impl Scenario {
    pub fn patient(&self, id: u16) -> Option<&PatientSpec> {
        self.patients.iter().find(|p| p.patient_id == id)
    }

    pub fn ticks(&self, p: &PatientSpec) -> u64 {
        (self.duration / p.report_interval + 1e-9).floor() as u64
    }

    pub fn expected_emissions(&self) -> u64 {
        self.patients.iter().map(|p| self.ticks(p)).sum::<u64>() * self.metrics.len() as u64
    }

    /// True value of `metric` for patient `p` at scenario time `t`.
    pub fn true_value(&self, p: &PatientSpec, metric: Metric, t: f64) -> f64 {
        let base_metric = if metric == Metric::Ecg {
            Metric::HeartRate
        } else {
            metric
        };
        let baseline = match base_metric {
            Metric::Temperature => p.baseline_temp,
            _ => p.baseline_bpm,
        };
        self.episodes
            .iter()
            .filter(|e| e.patient_id == p.patient_id && e.metric == base_metric)
            .find_map(|e| e.value_at(t, baseline))
            .unwrap_or(baseline)
    }

    /// Every frame the scenario will send, in send order. Pure and
    /// deterministic in the scenario and seed.
    pub fn emissions(&self) -> Vec<Emission> {
        let mode = ApiMode::from_escaped(self.escaped);
        let mut slots: Vec<(f64, usize, u64)> = Vec::new();
        for (pi, p) in self.patients.iter().enumerate() {
            for tick in 0..self.ticks(p) {
                slots.push((tick as f64 * p.report_interval, pi, tick));
            }
        }
        slots.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut sequences = vec![0u16; self.patients.len()];
        let mut out = Vec::with_capacity(slots.len() * self.metrics.len());
        for (t, pi, tick) in slots {
            let p = &self.patients[pi];
            for &metric in &self.metrics {
                let truth = self.true_value(p, metric, t);
                let seed = mix_seed(self.rng_seed, p.patient_id, metric, tick);
                let raw_value = sample_raw(metric, truth, t, seed);
                let sequence = sequences[pi];
                sequences[pi] = sequence.wrapping_add(1);
                let payload = TelemetryPayload {
                    patient_id: p.patient_id,
                    metric,
                    sequence,
                    raw_value,
                };
                let packet = ReceivePacket {
                    source_addr64: node_addr64(p.patient_id),
                    source_addr16: 0xFFFE,
                    receive_options: 0x01,
                    rf_data: payload.encode().to_vec(),
                };
                let bytes = encode_frame(&packet.to_frame(), mode).expect("payload frame fits");
                out.push(Emission {
                    reading: EmittedReading {
                        scenario_time_s: t,
                        patient_id: p.patient_id,
                        metric,
                        true_value: truth,
                        value: payload.value(),
                        raw_value,
                        sequence,
                        unreliable: metric == Metric::HeartRate && t < self.warmup,
                    },
                    bytes,
                });
            }
        }
        out
    }
}

/// Per-sample seed so each reading is reproducible on its own.
fn mix_seed(seed: u64, patient: u16, metric: Metric, tick: u64) -> u64 {
    let mut z = seed
        ^ (u64::from(patient) << 48)
        ^ (u64::from(metric.code()) << 40)
        ^ tick.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_raw(metric: Metric, truth: f64, t: f64, seed: u64) -> i16 {
    match metric {
        Metric::Temperature => {
            let mv = Lm35Model::default()
                .simulate(truth, seed)
                .expect("scenario temperatures are validated");
            let c = lm35_celsius_from_millivolts(mv).expect("model output is in range");
            (c / metric.scale()).round() as i16
        }
        Metric::HeartRate => {
            let bpm = synth_pulse_signal(truth, PULSE_WINDOW_S, PULSE_SAMPLE_RATE, seed)
                .ok()
                .and_then(|s| bpm_from_beats(&detect_beats(&s)).ok())
                // the detector found under two beats; report the set rate
                .unwrap_or(truth);
            (bpm / metric.scale()).round() as i16
        }
        Metric::Ecg => {
            let model = EcgModel::new(truth, 1.0).expect("scenario rates are validated");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.01).expect("positive sigma").sample(&mut rng);
            let mv = model.value_at(t, f64::INFINITY) + noise;
            (mv / metric.scale()).round() as i16
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmittedReading {
    pub scenario_time_s: f64,
    pub patient_id: u16,
    pub metric: Metric,
    /// Value the sensor model was driven with.
    pub true_value: f64,
    /// Value carried on the wire, in engineering units.
    pub value: f64,
    pub raw_value: i16,
    pub sequence: u16,
    pub unreliable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub reading: EmittedReading,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub readings: Vec<EmittedReading>,
    pub frames: u64,
    pub bytes: u64,
    pub wall_elapsed_ms: u64,
}

#[derive(Debug)]
pub struct SimulationAborted {
    pub report: SimulationReport,
    pub error: io::Error,
}

impl fmt::Display for SimulationAborted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "transport failed after {} frames: {}",
            self.report.frames, self.error
        )
    }
}

impl std::error::Error for SimulationAborted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Streams the scenario into `sink`, paced by its clock. Frames are written
/// whole; frames due at the same instant go out in one write.
pub async fn run_scenario<W>(s: &Scenario, sink: &mut W) -> Result<SimulationReport, SimulationAborted>
where
    W: AsyncWrite + Unpin + ?Sized,
{
    let factor = s.clock.factor();
    let started = Instant::now();
    let mut report = SimulationReport::default();
    let emissions = s.emissions();
    let mut i = 0;
    while i < emissions.len() {
        let t = emissions[i].reading.scenario_time_s;
        tokio::time::sleep_until(started + Duration::from_secs_f64(t / factor)).await;
        let mut batch = Vec::new();
        let first = i;
        while i < emissions.len() && emissions[i].reading.scenario_time_s == t {
            batch.extend_from_slice(&emissions[i].bytes);
            i += 1;
        }
        let write = async {
            sink.write_all(&batch).await?;
            sink.flush().await
        };
        if let Err(error) = write.await {
            report.wall_elapsed_ms = started.elapsed().as_millis() as u64;
            return Err(SimulationAborted { report, error });
        }
        for e in &emissions[first..i] {
            report.readings.push(e.reading.clone());
            report.frames += 1;
            report.bytes += e.bytes.len() as u64;
        }
    }
    // Hold the stream open until the scenario's end so the last interval
    // lasts as long as the others.
    tokio::time::sleep_until(started + Duration::from_secs_f64(s.duration / factor)).await;
    report.wall_elapsed_ms = started.elapsed().as_millis() as u64;
    Ok(report)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    duration: Spanned<f64>,
    rng_seed: Option<u64>,
    acceleration: Option<Spanned<f64>>,
    metrics: Option<Spanned<Vec<Spanned<String>>>>,
    warmup: Option<Spanned<f64>>,
    escaped: Option<bool>,
    #[serde(default)]
    patient: Vec<Spanned<PatientDoc>>,
    #[serde(default)]
    episode: Vec<Spanned<EpisodeDoc>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientDoc {
    patient_id: Spanned<u16>,
    baseline_temp: Option<Spanned<f64>>,
    baseline_bpm: Option<Spanned<f64>>,
    report_interval: Option<Spanned<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeDoc {
    patient_id: Spanned<u16>,
    metric: Spanned<String>,
    start: Spanned<f64>,
    duration: Spanned<f64>,
    target_value: Spanned<f64>,
}

fn value_range(metric: Metric) -> (f64, f64) {
    match metric {
        Metric::Temperature => (0.0, LM35_MAX_MV / LM35_MV_PER_C),
        _ => (MIN_BPM, MAX_BPM),
    }
}

/// Parses and validates a scenario document.
///
/// ```toml
/// duration = 120          # simulated seconds, required
/// rng_seed = 7            # default 0
/// acceleration = 60       # simulated seconds per wall second; 1 = real time (default)
/// metrics = ["temperature", "heart_rate"]   # default; "ecg" also allowed
/// warmup = 0              # s; earlier heart-rate readings are flagged unreliable
/// escaped = false         # API mode 2 framing
///
/// [[patient]]
/// patient_id = 1
/// baseline_temp = 37.0    # default 37.0 °C
/// baseline_bpm = 72       # default 72
/// report_interval = 1.0   # default 1 s
///
/// [[episode]]
/// patient_id = 1
/// metric = "temperature"  # or "heart_rate"
/// start = 30
/// duration = 60
/// target_value = 39.5
/// ```
pub fn load_scenario(text: &str) -> Result<Scenario, ConfigError> {
    let doc: ScenarioDoc = toml::from_str(text).map_err(|e| ConfigError::from_toml(text, &e))?;
    let err = |span: std::ops::Range<usize>, field: &str, msg: String| ConfigError::at(text, span, field, msg);
    let mut defaults = Vec::new();

    let duration = *doc.duration.get_ref();
    if !(duration.is_finite() && duration > 0.0) {
        return Err(err(doc.duration.span(), "duration", "must be a positive number of seconds".into()));
    }
    let rng_seed = doc.rng_seed.unwrap_or_else(|| {
        defaults.push("rng_seed = 0".to_string());
        0
    });
    let clock = match &doc.acceleration {
        None => {
            defaults.push("acceleration = 1 (real time)".to_string());
            ClockMode::RealTime
        }
        Some(k) => {
            let f = *k.get_ref();
            if !(f.is_finite() && f >= 1.0) {
                return Err(err(k.span(), "acceleration", format!("must be at least 1, got {f}")));
            }
            if f == 1.0 {
                ClockMode::RealTime
            } else {
                ClockMode::Accelerated(f)
            }
        }
    };
    let metrics = match &doc.metrics {
        None => {
            defaults.push("metrics = [\"temperature\", \"heart_rate\"]".to_string());
            vec![Metric::Temperature, Metric::HeartRate]
        }
        Some(list) => {
            let mut out = Vec::new();
            for m in list.get_ref() {
                let metric: Metric = m
                    .get_ref()
                    .parse()
                    .map_err(|_| err(m.span(), "metrics", format!("unknown metric `{}`", m.get_ref())))?;
                if out.contains(&metric) {
                    return Err(err(m.span(), "metrics", format!("`{}` listed twice", m.get_ref())));
                }
                out.push(metric);
            }
            if out.is_empty() {
                return Err(err(list.span(), "metrics", "must name at least one metric".into()));
            }
            out
        }
    };
    let warmup = match &doc.warmup {
        None => {
            defaults.push("warmup = 0".to_string());
            0.0
        }
        Some(w) => {
            let v = *w.get_ref();
            if !(v.is_finite() && v >= 0.0) {
                return Err(err(w.span(), "warmup", "must be a non-negative number of seconds".into()));
            }
            v
        }
    };
    let escaped = doc.escaped.unwrap_or_else(|| {
        defaults.push("escaped = false".to_string());
        false
    });

    if doc.patient.is_empty() {
        return Err(ConfigError {
            field: "patient".into(),
            line: None,
            message: "at least one [[patient]] is required".into(),
        });
    }
    let mut ids = BTreeSet::new();
    let mut patients = Vec::new();
    for entry in &doc.patient {
        let p = entry.get_ref();
        let id = *p.patient_id.get_ref();
        if !ids.insert(id) {
            return Err(err(p.patient_id.span(), "patient_id", format!("patient {id} is listed twice")));
        }
        let mut field = |v: &Option<Spanned<f64>>, name: &str, default: f64, ok: &dyn Fn(f64) -> bool, rule: &str| {
            match v {
                None => {
                    defaults.push(format!("patient {id}: {name} = {default}"));
                    Ok(default)
                }
                Some(s) if ok(*s.get_ref()) => Ok(*s.get_ref()),
                Some(s) => Err(err(s.span(), name, format!("{rule}, got {}", s.get_ref()))),
            }
        };
        let (tlo, thi) = value_range(Metric::Temperature);
        let baseline_temp = field(
            &p.baseline_temp,
            "baseline_temp",
            DEFAULT_BASELINE_TEMP,
            &|v| (tlo..=thi).contains(&v),
            "must be within 0 to 150 °C",
        )?;
        let baseline_bpm = field(
            &p.baseline_bpm,
            "baseline_bpm",
            DEFAULT_BASELINE_BPM,
            &|v| (MIN_BPM..=MAX_BPM).contains(&v),
            "must be within 30 to 220 BPM",
        )?;
        let report_interval = field(
            &p.report_interval,
            "report_interval",
            DEFAULT_REPORT_INTERVAL_S,
            &|v| v.is_finite() && v > 0.0,
            "must be a positive number of seconds",
        )?;
        patients.push(PatientSpec {
            patient_id: id,
            baseline_temp,
            baseline_bpm,
            report_interval,
        });
    }

    let mut episodes: Vec<(Episode, std::ops::Range<usize>)> = Vec::new();
    for entry in &doc.episode {
        let e = entry.get_ref();
        let id = *e.patient_id.get_ref();
        if !ids.contains(&id) {
            return Err(err(e.patient_id.span(), "patient_id", format!("no [[patient]] with id {id}")));
        }
        let metric: Metric = e
            .metric
            .get_ref()
            .parse()
            .map_err(|_| err(e.metric.span(), "metric", format!("unknown metric `{}`", e.metric.get_ref())))?;
        if metric == Metric::Ecg {
            return Err(err(
                e.metric.span(),
                "metric",
                "ECG follows the heart rate; use a heart_rate episode".into(),
            ));
        }
        let start = *e.start.get_ref();
        let len = *e.duration.get_ref();
        if !(start.is_finite() && start >= 0.0) {
            return Err(err(e.start.span(), "start", "must be a non-negative number of seconds".into()));
        }
        if !(len.is_finite() && len > 0.0) {
            return Err(err(e.duration.span(), "duration", "must be a positive number of seconds".into()));
        }
        if start + len > duration {
            return Err(err(
                e.duration.span(),
                "duration",
                format!("episode ends at {} s, after the scenario's {duration} s", start + len),
            ));
        }
        let target = *e.target_value.get_ref();
        let (lo, hi) = value_range(metric);
        if !(lo..=hi).contains(&target) {
            return Err(err(
                e.target_value.span(),
                "target_value",
                format!("must be within {lo} to {hi} for {}", metric.as_str()),
            ));
        }
        let ep = Episode {
            patient_id: id,
            metric,
            start,
            duration: len,
            target_value: target,
        };
        if let Some((other, _)) = episodes
            .iter()
            .find(|(o, _)| o.patient_id == id && o.metric == metric && o.start < ep.end() && ep.start < o.end())
        {
            return Err(err(
                entry.span(),
                "episode",
                format!(
                    "overlaps the {} episode from {} s to {} s for patient {id}",
                    metric.as_str(),
                    other.start,
                    other.end()
                ),
            ));
        }
        episodes.push((ep, entry.span()));
    }

    Ok(Scenario {
        duration,
        patients,
        episodes: episodes.into_iter().map(|(e, _)| e).collect(),
        clock,
        rng_seed,
        metrics,
        warmup,
        escaped,
        defaults_applied: defaults,
    })
}
