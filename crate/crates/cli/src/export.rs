//! CSV export format shared by `store query --csv` and `replay`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use vitalgate::model::{iso_ms, SensorReading, Unit};
use vitalgate::store::parse_reading_line;
use vitalgate::wire::Metric;

use crate::Failure;

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    #[serde(with = "iso_ms")]
    timestamp: chrono::DateTime<chrono::Utc>,
    patient_id: u16,
    metric: Metric,
    value: f64,
    unit: Unit,
    sequence: u16,
    source_addr64: String,
}

impl From<&SensorReading> for Row {
    fn from(r: &SensorReading) -> Self {
        Row {
            timestamp: r.timestamp,
            patient_id: r.patient_id,
            metric: r.metric,
            value: r.value,
            unit: r.unit,
            sequence: r.sequence,
            source_addr64: format!("{:016X}", r.source_addr64),
        }
    }
}

impl TryFrom<Row> for SensorReading {
    type Error = String;

    fn try_from(r: Row) -> Result<Self, String> {
        if r.unit != r.metric.unit() {
            return Err(format!("unit {:?} does not match metric {}", r.unit, r.metric.as_str()));
        }
        if !r.value.is_finite() {
            return Err("value: not finite".into());
        }
        if !r.timestamp.timestamp_subsec_nanos().is_multiple_of(1_000_000) {
            return Err("timestamp: finer than millisecond precision".into());
        }
        let source_addr64 =
            u64::from_str_radix(&r.source_addr64, 16).map_err(|e| format!("source_addr64: {e}"))?;
        Ok(SensorReading {
            patient_id: r.patient_id,
            metric: r.metric,
            value: r.value,
            unit: r.unit,
            timestamp: r.timestamp,
            sequence: r.sequence,
            source_addr64,
        })
    }
}

pub struct CsvWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(w: W) -> Self {
        Self {
            inner: csv::WriterBuilder::new().has_headers(true).from_writer(w),
        }
    }

    pub fn write(&mut self, r: &SensorReading) -> Result<(), Failure> {
        self.inner
            .serialize(Row::from(r))
            .map_err(|e| Failure::Io(format!("writing CSV: {e}")))
    }

    pub fn flush(&mut self) -> Result<(), Failure> {
        self.inner
            .flush()
            .map_err(|e| Failure::Io(format!("writing CSV: {e}")))
    }
}

pub fn parse_csv(text: &str) -> Result<Vec<SensorReading>, Failure> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Failure::Protocol(format!("CSV line {line}: {e}")))?;
        out.push(
            SensorReading::try_from(row).map_err(|e| Failure::Protocol(format!("CSV line {line}: {e}")))?,
        );
    }
    Ok(out)
}

/// Parses a `readings.log`. A final line without a newline is a torn write
/// and is skipped.
pub fn parse_log(text: &str) -> Result<Vec<SensorReading>, Failure> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_reading_line(l).map_err(|e| Failure::Protocol(format!("log line {}: {e}", i + 1))))
        .collect()
}

/// Accepts either export format, detected from the first line.
pub fn parse_any(text: &str) -> Result<Vec<SensorReading>, Failure> {
    if text.starts_with("timestamp,") {
        parse_csv(text)
    } else {
        parse_log(text)
    }
}
