//! Append-only reading and alert logs with an in-memory index.
//!
//! A store is a directory holding two files:
//!
//! * `readings.log`: one reading per line, tab-separated:
//!   `timestamp  patient_id  metric  value  sequence  source_addr64`, where
//!   the timestamp is ISO-8601 UTC with milliseconds, metric is
//!   `temperature`/`heart_rate`/`ecg`, value is in the metric's engineering
//!   unit (°C, BPM, mV) printed in shortest round-trip form, and the address
//!   is 16 upper-case hex digits.
//! * `alerts.log`: one JSON alert snapshot per line, appended on every
//!   lifecycle change. The last snapshot of an id is its current state.
//!
//! The index is rebuilt by a full scan on open. A trailing line without a
//! newline is a torn write from a crash and is cut off.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{iso_ms, Alert, AlertId, SensorReading};
use crate::wire::Metric;

pub const READINGS_FILE: &str = "readings.log";
pub const ALERTS_FILE: &str = "alerts.log";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unknown patient {0}")]
    UnknownPatient(u16),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
}

/// When appends are flushed to stable storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FsyncPolicy {
    /// `fdatasync` after every append.
    #[default]
    Always,
    /// Write-through to the OS only; survives a process crash, not power loss.
    Never,
}

impl std::str::FromStr for FsyncPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "always" => Ok(FsyncPolicy::Always),
            "never" => Ok(FsyncPolicy::Never),
            other => Err(format!("unknown fsync policy `{other}` (always|never)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesQuery {
    pub patient_id: u16,
    pub metric: Metric,
    pub from: DateTime<Utc>,
    pub to: DateTime<Utc>,
    pub max_points: Option<usize>,
}

impl SeriesQuery {
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.from > self.to {
            return Err(StoreError::InvalidQuery("from must not be after to".into()));
        }
        if matches!(self.max_points, Some(n) if n < 2) {
            return Err(StoreError::InvalidQuery("max_points must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    #[serde(with = "iso_ms")]
    pub timestamp: DateTime<Utc>,
    pub value: f64,
}

/// Formats one `readings.log` line, without the newline.
pub fn format_reading_line(r: &SensorReading) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{:016X}",
        iso_ms::format(&r.timestamp),
        r.patient_id,
        r.metric.as_str(),
        r.value,
        r.sequence,
        r.source_addr64
    )
}

pub fn parse_reading_line(line: &str) -> Result<SensorReading, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 6 {
        return Err(format!("expected 6 tab-separated fields, got {}", fields.len()));
    }
    let timestamp = iso_ms::parse(fields[0]).map_err(|e| format!("timestamp: {e}"))?;
    if timestamp.timestamp_subsec_nanos() % 1_000_000 != 0 {
        return Err("timestamp: finer than millisecond precision".into());
    }
    let patient_id = fields[1]
        .parse::<u16>()
        .map_err(|e| format!("patient_id: {e}"))?;
    let metric: Metric = fields[2].parse()?;
    let value = fields[3].parse::<f64>().map_err(|e| format!("value: {e}"))?;
    if !value.is_finite() {
        return Err("value: not finite".into());
    }
    let sequence = fields[4].parse::<u16>().map_err(|e| format!("sequence: {e}"))?;
    let source_addr64 =
        u64::from_str_radix(fields[5], 16).map_err(|e| format!("source_addr64: {e}"))?;
    Ok(SensorReading {
        patient_id,
        metric,
        value,
        unit: metric.unit(),
        timestamp,
        sequence,
        source_addr64,
    })
}

#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    fsync: FsyncPolicy,
    // None when opened read-only
    readings_file: Option<File>,
    alerts_file: Option<File>,
    readings: Vec<SensorReading>,
    // per-series reading indices, ordered by timestamp (stable for ties)
    series: HashMap<(u16, Metric), Vec<usize>>,
    patients: BTreeSet<u16>,
    alerts: BTreeMap<AlertId, Alert>,
}

impl Store {
    /// Opens (creating if needed) the store in `dir` and rebuilds the index.
    pub fn open(dir: impl AsRef<Path>, fsync: FsyncPolicy) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|source| StoreError::Io {
            path: dir.clone(),
            source,
        })?;
        Self::load(dir, fsync, true)
    }

    /// Opens an existing store for queries only. Nothing is created or
    /// repaired, so this is safe while a gateway is appending; a torn
    /// trailing record is skipped.
    pub fn open_read_only(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        match std::fs::metadata(&dir) {
            Ok(m) if m.is_dir() => {}
            Ok(_) => {
                return Err(StoreError::Io {
                    path: dir,
                    source: io::Error::new(io::ErrorKind::InvalidInput, "not a directory"),
                })
            }
            Err(source) => return Err(StoreError::Io { path: dir, source }),
        }
        Self::load(dir, FsyncPolicy::Never, false)
    }

    fn load(dir: PathBuf, fsync: FsyncPolicy, writable: bool) -> Result<Self, StoreError> {
        let readings_path = dir.join(READINGS_FILE);
        let alerts_path = dir.join(ALERTS_FILE);
        let readings_lines = load_lines(&readings_path, writable)?;
        let alerts_lines = load_lines(&alerts_path, writable)?;
        let (readings_file, alerts_file) = if writable {
            (Some(open_append(&readings_path)?), Some(open_append(&alerts_path)?))
        } else {
            (None, None)
        };

        let mut store = Self {
            readings_file,
            alerts_file,
            dir,
            fsync,
            readings: Vec::with_capacity(readings_lines.len()),
            series: HashMap::new(),
            patients: BTreeSet::new(),
            alerts: BTreeMap::new(),
        };
        for (i, line) in readings_lines.iter().enumerate() {
            let r = parse_reading_line(line).map_err(|message| StoreError::Corrupt {
                path: readings_path.clone(),
                line: i + 1,
                message,
            })?;
            store.index(r);
        }
        for (i, line) in alerts_lines.iter().enumerate() {
            let a: Alert = serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
                path: alerts_path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            store.alerts.insert(a.alert_id, a);
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn readings_path(&self) -> PathBuf {
        self.dir.join(READINGS_FILE)
    }

    /// Marks a patient as known even before any data arrives.
    pub fn register_patient(&mut self, patient_id: u16) {
        self.patients.insert(patient_id);
    }

    pub fn knows_patient(&self, patient_id: u16) -> bool {
        self.patients.contains(&patient_id)
    }

    fn index(&mut self, r: SensorReading) -> u64 {
        let pos = self.readings.len();
        let key = (r.patient_id, r.metric);
        self.patients.insert(r.patient_id);
        let ts = r.timestamp;
        self.readings.push(r);
        let idx = self.series.entry(key).or_default();
        let readings = &self.readings;
        let at = if idx.last().is_none_or(|&l| readings[l].timestamp <= ts) {
            idx.len()
        } else {
            idx.partition_point(|&i| readings[i].timestamp <= ts)
        };
        idx.insert(at, pos);
        pos as u64
    }

    fn write_line(&mut self, which: LogFile, line: &str) -> Result<(), StoreError> {
        let (file, name) = match which {
            LogFile::Readings => (&mut self.readings_file, READINGS_FILE),
            LogFile::Alerts => (&mut self.alerts_file, ALERTS_FILE),
        };
        let Some(file) = file.as_mut() else {
            return Err(StoreError::Io {
                path: self.dir.join(name),
                source: io::Error::new(io::ErrorKind::PermissionDenied, "store is open read-only"),
            });
        };
        let mut buf = Vec::with_capacity(line.len() + 1);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        let res = file.write_all(&buf).and_then(|_| match self.fsync {
            FsyncPolicy::Always => file.sync_data(),
            FsyncPolicy::Never => Ok(()),
        });
        res.map_err(|source| StoreError::Io {
            path: self.dir.join(name),
            source,
        })
    }

    /// Appends a reading; returns its position in the log.
    pub fn append_reading(&mut self, r: &SensorReading) -> Result<u64, StoreError> {
        self.write_line(LogFile::Readings, &format_reading_line(r))?;
        Ok(self.index(r.clone()))
    }

    pub fn reading_count(&self) -> usize {
        self.readings.len()
    }

    /// All readings in append order.
    pub fn readings(&self) -> &[SensorReading] {
        &self.readings
    }

    /// Points with `from <= t < to` in ascending time order, bucket-averaged
    /// down to `max_points` when there are more.
    pub fn query_series(&self, q: &SeriesQuery) -> Result<Vec<SeriesPoint>, StoreError> {
        q.validate()?;
        if !self.knows_patient(q.patient_id) {
            return Err(StoreError::UnknownPatient(q.patient_id));
        }
        let Some(idx) = self.series.get(&(q.patient_id, q.metric)) else {
            return Ok(Vec::new());
        };
        let ts = |i: &usize| self.readings[*i].timestamp;
        let lo = idx.partition_point(|i| ts(i) < q.from);
        let hi = idx.partition_point(|i| ts(i) < q.to);
        let points: Vec<SeriesPoint> = idx[lo..hi.max(lo)]
            .iter()
            .map(|&i| SeriesPoint {
                timestamp: self.readings[i].timestamp,
                value: self.readings[i].value,
            })
            .collect();
        Ok(match q.max_points {
            Some(max) if points.len() > max => downsample(&points, q.from, q.to, max),
            _ => points,
        })
    }

    /// Most recent reading of each metric for a patient.
    pub fn latest(&self, patient_id: u16) -> BTreeMap<Metric, SensorReading> {
        Metric::ALL
            .into_iter()
            .filter_map(|m| {
                let idx = self.series.get(&(patient_id, m))?;
                let last = *idx.last()?;
                Some((m, self.readings[last].clone()))
            })
            .collect()
    }

    /// Persists a new alert snapshot.
    pub fn put_alert(&mut self, alert: &Alert) -> Result<(), StoreError> {
        let line = serde_json::to_string(alert).expect("alert serializes");
        self.write_line(LogFile::Alerts, &line)?;
        self.alerts.insert(alert.alert_id, alert.clone());
        Ok(())
    }

    pub fn alert(&self, id: AlertId) -> Option<&Alert> {
        self.alerts.get(&id)
    }

    pub fn alerts(&self) -> impl Iterator<Item = &Alert> {
        self.alerts.values()
    }

    pub fn next_alert_id(&self) -> AlertId {
        self.alerts.keys().next_back().map_or(1, |id| id + 1)
    }
}

#[derive(Clone, Copy)]
enum LogFile {
    Readings,
    Alerts,
}

/// Splits `[from, to)` into `buckets` equal spans (integer milliseconds) and
/// averages each non-empty span. Each bucket is stamped with its start.
pub fn downsample(
    points: &[SeriesPoint],
    from: DateTime<Utc>,
    to: DateTime<Utc>,
    buckets: usize,
) -> Vec<SeriesPoint> {
    let start = i128::from(from.timestamp_millis());
    let span = i128::from(to.timestamp_millis()) - start;
    if span <= 0 || buckets == 0 {
        return Vec::new();
    }
    let n = buckets as i128;
    let mut sums: BTreeMap<i128, (f64, usize)> = BTreeMap::new();
    for p in points {
        let off = i128::from(p.timestamp.timestamp_millis()) - start;
        let b = (off * n / span).clamp(0, n - 1);
        let e = sums.entry(b).or_insert((0.0, 0));
        e.0 += p.value;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(b, (sum, count))| {
            let ms = start + b * span / n;
            SeriesPoint {
                timestamp: DateTime::from_timestamp_millis(ms as i64).expect("in range"),
                value: sum / count as f64,
            }
        })
        .collect()
}

fn open_append(path: &Path) -> Result<File, StoreError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Reads complete lines. With `repair`, a torn final line is truncated in
/// place; otherwise it is only skipped.
fn load_lines(path: &Path, repair: bool) -> Result<Vec<String>, StoreError> {
    let io_err = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = match OpenOptions::new().read(true).write(repair).open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(e)),
    };
    let mut lines = Vec::new();
    let mut good_len = 0u64;
    let mut reader = BufReader::new(&mut file);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf).map_err(io_err)?;
        if n == 0 {
            break;
        }
        if buf.last() != Some(&b'\n') {
            tracing::warn!(path = %path.display(), bytes = n, "dropping torn trailing record");
            break;
        }
        good_len += n as u64;
        let line = String::from_utf8_lossy(&buf[..buf.len() - 1]).into_owned();
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    drop(reader);
    if repair && file.seek(SeekFrom::End(0)).map_err(io_err)? != good_len {
        file.set_len(good_len).map_err(io_err)?;
    }
    Ok(lines)
}
