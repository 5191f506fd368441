//! Readings, patients, thresholds and alerts.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sms::AtTranscript;
use crate::wire::Metric;

/// Serde adapter for `YYYY-MM-DDTHH:MM:SS.mmmZ`.
pub mod iso_ms {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn format(t: &DateTime<Utc>) -> String {
        t.to_rfc3339_opts(SecondsFormat::Millis, true)
    }

    pub fn parse(s: &str) -> Result<DateTime<Utc>, chrono::ParseError> {
        DateTime::parse_from_rfc3339(s).map(|t| t.with_timezone(&Utc))
    }

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format(t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).map_err(serde::de::Error::custom)
    }

    pub mod option {
        use super::*;
        use serde::Serialize;

        pub fn serialize<S: Serializer>(t: &Option<DateTime<Utc>>, s: S) -> Result<S::Ok, S::Error> {
            t.as_ref().map(format).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            d: D,
        ) -> Result<Option<DateTime<Utc>>, D::Error> {
            Option::<String>::deserialize(d)?
                .map(|s| parse(&s).map_err(serde::de::Error::custom))
                .transpose()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Celsius,
    Bpm,
    Millivolt,
}

impl Unit {
    /// Suffix used in SMS text.
    pub fn symbol(self) -> &'static str {
        match self {
            Unit::Celsius => "C",
            Unit::Bpm => "BPM",
            Unit::Millivolt => "mV",
        }
    }
}

impl Metric {
    pub fn unit(self) -> Unit {
        match self {
            Metric::Temperature => Unit::Celsius,
            Metric::HeartRate => Unit::Bpm,
            Metric::Ecg => Unit::Millivolt,
        }
    }

    /// Short label used in SMS text.
    pub fn label(self) -> &'static str {
        match self {
            Metric::Temperature => "TEMP",
            Metric::HeartRate => "HR",
            Metric::Ecg => "ECG",
        }
    }

    /// Whether readings of this metric go through range checks.
    pub fn is_monitored(self) -> bool {
        !matches!(self, Metric::Ecg)
    }
}

/// One decoded measurement, stamped by the gateway at ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorReading {
    pub patient_id: u16,
    pub metric: Metric,
    pub value: f64,
    pub unit: Unit,
    #[serde(with = "iso_ms")]
    pub timestamp: DateTime<Utc>,
    pub sequence: u16,
    pub source_addr64: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{field}: {message}")]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub const DEFAULT_DEBOUNCE_S: f64 = 300.0;
pub const DEFAULT_RESOLVE_AFTER: u32 = 3;

/// Normal range for one metric plus the alert debounce/resolve policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitalThresholds {
    pub metric: Metric,
    pub low: f64,
    pub high: f64,
    pub debounce_window_s: f64,
    pub resolve_after: u32,
}

impl VitalThresholds {
    pub fn new(metric: Metric, low: f64, high: f64) -> Self {
        Self {
            metric,
            low,
            high,
            debounce_window_s: DEFAULT_DEBOUNCE_S,
            resolve_after: DEFAULT_RESOLVE_AFTER,
        }
    }

    /// Configuration defaults: 36–38 °C and 60–100 BPM.
    pub fn default_for(metric: Metric) -> Option<Self> {
        match metric {
            Metric::Temperature => Some(Self::new(metric, 36.0, 38.0)),
            Metric::HeartRate => Some(Self::new(metric, 60.0, 100.0)),
            Metric::Ecg => None,
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if !self.low.is_finite() {
            return Err(ValidationError::new("low", "must be a finite number"));
        }
        if !self.high.is_finite() {
            return Err(ValidationError::new("high", "must be a finite number"));
        }
        if self.low >= self.high {
            return Err(ValidationError::new(
                "low",
                format!("low ({}) must be below high ({})", self.low, self.high),
            ));
        }
        if !(self.debounce_window_s.is_finite() && self.debounce_window_s >= 0.0) {
            return Err(ValidationError::new(
                "debounce_window_s",
                "must be a non-negative number of seconds",
            ));
        }
        if self.resolve_after < 1 {
            return Err(ValidationError::new("resolve_after", "must be at least 1"));
        }
        Ok(())
    }

    pub fn contains(&self, value: f64) -> bool {
        (self.low..=self.high).contains(&value)
    }
}

/// `+` followed by 2 to 15 digits, first digit non-zero.
pub fn is_e164(phone: &str) -> bool {
    let Some(digits) = phone.strip_prefix('+') else {
        return false;
    };
    (2..=15).contains(&digits.len())
        && digits.bytes().all(|b| b.is_ascii_digit())
        && !digits.starts_with('0')
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub patient_id: u16,
    pub display_name: String,
    pub doctor_phone: String,
    pub thresholds: BTreeMap<Metric, VitalThresholds>,
}

impl Patient {
    /// Builds a patient with default thresholds for every monitored metric.
    pub fn new(patient_id: u16, display_name: impl Into<String>, doctor_phone: impl Into<String>) -> Self {
        let thresholds = Metric::ALL
            .into_iter()
            .filter_map(VitalThresholds::default_for)
            .map(|t| (t.metric, t))
            .collect();
        Self {
            patient_id,
            display_name: display_name.into(),
            doctor_phone: doctor_phone.into(),
            thresholds,
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.display_name.is_empty() || self.display_name.len() > 32 {
            return Err(ValidationError::new("display_name", "must be 1 to 32 characters"));
        }
        if !self.display_name.chars().all(crate::sms::is_sms_safe) {
            return Err(ValidationError::new(
                "display_name",
                "must use the GSM-safe ASCII subset",
            ));
        }
        if !is_e164(&self.doctor_phone) {
            return Err(ValidationError::new(
                "doctor_phone",
                format!("`{}` is not an E.164 number", self.doctor_phone),
            ));
        }
        for metric in Metric::ALL.into_iter().filter(|m| m.is_monitored()) {
            match self.thresholds.get(&metric) {
                None => {
                    return Err(ValidationError::new(
                        format!("thresholds.{metric}"),
                        "missing thresholds for a monitored metric",
                    ))
                }
                Some(t) if t.metric != metric => {
                    return Err(ValidationError::new(
                        format!("thresholds.{metric}.metric"),
                        "does not match its key",
                    ))
                }
                Some(t) => t.validate().map_err(|e| {
                    ValidationError::new(format!("thresholds.{metric}.{}", e.field), e.message)
                })?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BreachedBound {
    Low,
    High,
}

impl fmt::Display for BreachedBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BreachedBound::Low => "LOW",
            BreachedBound::High => "HIGH",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertState {
    Open,
    Notified,
    Acknowledged,
    Resolved,
}

impl AlertState {
    /// Allowed lifecycle edges.
    pub fn can_move_to(self, next: AlertState) -> bool {
        use AlertState::*;
        matches!(
            (self, next),
            (Open, Notified)
                | (Open, Acknowledged)
                | (Notified, Acknowledged)
                | (Notified, Resolved)
                | (Acknowledged, Resolved)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AlertState::Open => "open",
            AlertState::Notified => "notified",
            AlertState::Acknowledged => "acknowledged",
            AlertState::Resolved => "resolved",
        }
    }
}

impl std::str::FromStr for AlertState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "open" => Ok(AlertState::Open),
            "notified" => Ok(AlertState::Notified),
            "acknowledged" => Ok(AlertState::Acknowledged),
            "resolved" => Ok(AlertState::Resolved),
            other => Err(format!("unknown alert state `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SmsStatus {
    Pending,
    Sent,
    Failed { attempts: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertTransition {
    pub state: AlertState,
    #[serde(with = "iso_ms")]
    pub at: DateTime<Utc>,
}

pub type AlertId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: AlertId,
    pub patient_id: u16,
    pub metric: Metric,
    pub observed_value: f64,
    pub breached_bound: BreachedBound,
    /// The bound that was crossed, in the metric's unit.
    pub limit: f64,
    pub state: AlertState,
    #[serde(with = "iso_ms")]
    pub created_at: DateTime<Utc>,
    pub sms_status: SmsStatus,
    /// Set when the readings returned to range before the alert could be
    /// closed; applied as soon as the lifecycle allows it.
    #[serde(default)]
    pub resolve_pending: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acknowledged_by: Option<String>,
    #[serde(default, with = "iso_ms::option", skip_serializing_if = "Option::is_none")]
    pub acknowledged_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<AtTranscript>,
    pub history: Vec<AlertTransition>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("alert {alert_id} cannot move from {from:?} to {to:?}")]
pub struct TransitionError {
    pub alert_id: AlertId,
    pub from: AlertState,
    pub to: AlertState,
}

impl Alert {
    pub fn open(
        alert_id: AlertId,
        reading: &SensorReading,
        breached_bound: BreachedBound,
        limit: f64,
    ) -> Self {
        Self {
            alert_id,
            patient_id: reading.patient_id,
            metric: reading.metric,
            observed_value: reading.value,
            breached_bound,
            limit,
            state: AlertState::Open,
            created_at: reading.timestamp,
            sms_status: SmsStatus::Pending,
            resolve_pending: false,
            acknowledged_by: None,
            acknowledged_at: None,
            transcript: None,
            history: vec![AlertTransition {
                state: AlertState::Open,
                at: reading.timestamp,
            }],
        }
    }

    pub fn transition(&mut self, to: AlertState, at: DateTime<Utc>) -> Result<(), TransitionError> {
        if !self.state.can_move_to(to) {
            return Err(TransitionError {
                alert_id: self.alert_id,
                from: self.state,
                to,
            });
        }
        self.state = to;
        self.history.push(AlertTransition { state: to, at });
        Ok(())
    }

    /// Moves to Resolved if a resolution is pending and the state allows it.
    pub fn apply_pending_resolution(&mut self, at: DateTime<Utc>) -> bool {
        if self.resolve_pending && self.state.can_move_to(AlertState::Resolved) {
            self.resolve_pending = false;
            self.state = AlertState::Resolved;
            self.history.push(AlertTransition {
                state: AlertState::Resolved,
                at,
            });
            true
        } else {
            false
        }
    }

    pub fn is_active(&self) -> bool {
        self.state != AlertState::Resolved
    }
}
