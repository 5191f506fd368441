//! Simulated time.
//!
//! Everything that waits (SMS stage timeouts, retry backoff, scenario pacing)
//! is expressed in simulated seconds and converted to wall time through the
//! clock's acceleration factor.

use std::fmt::Debug;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, DurationRound, TimeDelta, Utc};
use tokio::time::Instant;

pub trait Clock: Send + Sync + Debug {
    /// Current simulated UTC time, millisecond precision.
    fn now(&self) -> DateTime<Utc>;

    /// Simulated seconds per wall-clock second (≥ 1).
    fn acceleration(&self) -> f64;

    /// Wall-clock time that corresponds to `sim` of simulated time.
    fn wall(&self, sim: Duration) -> Duration {
        sim.div_f64(self.acceleration())
    }
}

pub type SharedClock = Arc<dyn Clock>;

pub fn truncate_ms(t: DateTime<Utc>) -> DateTime<Utc> {
    t.duration_trunc(TimeDelta::milliseconds(1)).unwrap_or(t)
}

/// Wall clock sped up by a constant factor from a fixed origin.
#[derive(Debug, Clone)]
pub struct ScaledClock {
    origin_utc: DateTime<Utc>,
    origin: Instant,
    factor: f64,
}

impl ScaledClock {
    pub fn real_time() -> Self {
        Self::accelerated(1.0)
    }

    /// Panics if `factor` is below 1 or not finite.
    pub fn accelerated(factor: f64) -> Self {
        Self::starting_at(Utc::now(), factor)
    }

    pub fn starting_at(origin_utc: DateTime<Utc>, factor: f64) -> Self {
        assert!(
            factor.is_finite() && factor >= 1.0,
            "acceleration factor must be >= 1, got {factor}"
        );
        Self {
            origin_utc,
            origin: Instant::now(),
            factor,
        }
    }
}

impl Clock for ScaledClock {
    fn now(&self) -> DateTime<Utc> {
        let elapsed = self.origin.elapsed().mul_f64(self.factor);
        let delta = TimeDelta::from_std(elapsed).unwrap_or(TimeDelta::MAX);
        truncate_ms(self.origin_utc + delta)
    }

    fn acceleration(&self) -> f64 {
        self.factor
    }
}

/// Clock that only moves when told to. Waits still run at wall speed, so
/// tests pair it with paused tokio time.
#[derive(Debug, Clone)]
pub struct ManualClock {
    now: Arc<Mutex<DateTime<Utc>>>,
}

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self {
            now: Arc::new(Mutex::new(truncate_ms(start))),
        }
    }

    pub fn set(&self, t: DateTime<Utc>) {
        *self.now.lock().expect("clock lock") = truncate_ms(t);
    }

    pub fn advance(&self, by: Duration) {
        let mut now = self.now.lock().expect("clock lock");
        *now += TimeDelta::from_std(by).expect("duration in range");
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock().expect("clock lock")
    }

    fn acceleration(&self) -> f64 {
        1.0
    }
}
