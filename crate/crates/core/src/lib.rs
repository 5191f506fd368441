//! Simulated patient-vitals telemetry.
//!
//! Body-sensor nodes send readings as XBee API frames to a gateway. The
//! gateway checks each reading against the patient's normal range, appends it
//! to a timestamped log, texts the doctor over a GSM modem when a range is
//! breached, and serves everything to a live dashboard over HTTP.

pub mod clock;
pub mod config;
pub mod gateway;
pub mod http;
pub mod model;
pub mod rules;
pub mod sensors;
pub mod simulator;
pub mod sms;
pub mod store;
pub mod wire;
