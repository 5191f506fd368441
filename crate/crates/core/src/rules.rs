//! Normal-range evaluation with debounce and resolve counting.

use chrono::{DateTime, TimeDelta, Utc};
use thiserror::Error;

use crate::model::{BreachedBound, SensorReading, VitalThresholds};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Normal,
    NewAlert { bound: BreachedBound, limit: f64 },
    SuppressedDuplicate { bound: BreachedBound },
    ResolvesAlert,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuleError {
    #[error("reading is {reading:?} ({unit:?}) but thresholds are for {thresholds:?}")]
    UnitMismatch {
        reading: crate::wire::Metric,
        unit: crate::model::Unit,
        thresholds: crate::wire::Metric,
    },
}

/// Per (patient, metric) memory between evaluations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuleState {
    pub alert_open: bool,
    pub last_alert_at: Option<DateTime<Utc>>,
    pub in_range_streak: u32,
}

impl RuleState {
    fn within_debounce(&self, now: DateTime<Utc>, window_s: f64) -> bool {
        self.last_alert_at.is_some_and(|last| {
            let window = TimeDelta::milliseconds((window_s * 1000.0).round() as i64);
            now - last < window
        })
    }
}

/// Classifies `reading` against `thresholds` and updates `state`.
///
/// Out of range: a new alert unless one is still open or the previous one is
/// younger than the debounce window. In range with an alert open: resolves
/// on the `resolve_after`-th consecutive in-range reading.
pub fn evaluate(
    reading: &SensorReading,
    thresholds: &VitalThresholds,
    state: &mut RuleState,
) -> Result<Decision, RuleError> {
    if reading.metric != thresholds.metric || reading.unit != thresholds.metric.unit() {
        return Err(RuleError::UnitMismatch {
            reading: reading.metric,
            unit: reading.unit,
            thresholds: thresholds.metric,
        });
    }
    let v = reading.value;
    let breach = if v < thresholds.low {
        Some((BreachedBound::Low, thresholds.low))
    } else if v > thresholds.high {
        Some((BreachedBound::High, thresholds.high))
    } else {
        None
    };

    match breach {
        Some((bound, limit)) => {
            state.in_range_streak = 0;
            if state.alert_open
                || state.within_debounce(reading.timestamp, thresholds.debounce_window_s)
            {
                Ok(Decision::SuppressedDuplicate { bound })
            } else {
                state.alert_open = true;
                state.last_alert_at = Some(reading.timestamp);
                Ok(Decision::NewAlert { bound, limit })
            }
        }
        None if state.alert_open => {
            state.in_range_streak += 1;
            if state.in_range_streak >= thresholds.resolve_after {
                state.alert_open = false;
                state.in_range_streak = 0;
                Ok(Decision::ResolvesAlert)
            } else {
                Ok(Decision::Normal)
            }
        }
        None => Ok(Decision::Normal),
    }
}
