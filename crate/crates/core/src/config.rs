//! Hand-written TOML configuration: the patient registry file, plus the
//! error type shared with scenario files.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use serde::Deserialize;
use toml::Spanned;

use crate::model::{Patient, ValidationError, VitalThresholds};
use crate::wire::Metric;

/// A configuration problem, located by field name and 1-based line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    pub fn at(text: &str, span: Range<usize>, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            line: Some(line_of(text, span.start)),
            message: message.into(),
        }
    }

    pub fn from_validation(text: &str, span: Range<usize>, e: ValidationError) -> Self {
        Self::at(text, span, e.field, e.message)
    }

    /// Converts a TOML parse or type error. The field is taken from the
    /// message when it names one, otherwise from the key on the offending line.
    pub fn from_toml(text: &str, e: &toml::de::Error) -> Self {
        let message = e.message().trim().to_string();
        let line = e.span().map(|s| line_of(text, s.start));
        let named = message
            .split('`')
            .nth(1)
            .filter(|_| message.contains("field `"))
            .map(str::to_string);
        let field = named
            .or_else(|| {
                let l = line?;
                let src = text.lines().nth(l - 1)?;
                let (key, _) = src.split_once('=')?;
                Some(key.trim().trim_matches('"').to_string())
            })
            .unwrap_or_else(|| "document".to_string());
        Self {
            field,
            line,
            message,
        }
    }
}

/// 1-based line containing byte `offset`.
pub fn line_of(text: &str, offset: usize) -> usize {
    text.as_bytes()[..offset.min(text.len())]
        .iter()
        .filter(|&&b| b == b'\n')
        .count()
        + 1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientsDoc {
    #[serde(default)]
    patient: Vec<Spanned<PatientEntry>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientEntry {
    patient_id: Spanned<u16>,
    display_name: Spanned<String>,
    doctor_phone: Spanned<String>,
    #[serde(default)]
    thresholds: Vec<Spanned<ThresholdEntry>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdEntry {
    metric: Spanned<String>,
    low: Spanned<f64>,
    high: Spanned<f64>,
    debounce_window_s: Option<Spanned<f64>>,
    resolve_after: Option<Spanned<u32>>,
}

/// Parses a patient registry:
///
/// ```toml
/// [[patient]]
/// patient_id = 1
/// display_name = "P001"
/// doctor_phone = "+15551234567"
///
/// [[patient.thresholds]]    # optional, per metric
/// metric = "temperature"
/// low = 36.0
/// high = 38.0
/// debounce_window_s = 300   # optional
/// resolve_after = 3         # optional
/// ```
///
/// Metrics without an entry get the default range.
pub fn load_patients(text: &str) -> Result<Vec<Patient>, ConfigError> {
    let doc: PatientsDoc = toml::from_str(text).map_err(|e| ConfigError::from_toml(text, &e))?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(doc.patient.len());
    for entry in doc.patient {
        let span = entry.span();
        let e = entry.into_inner();
        let id = *e.patient_id.get_ref();
        if !seen.insert(id) {
            return Err(ConfigError::at(
                text,
                e.patient_id.span(),
                "patient_id",
                format!("patient {id} is listed twice"),
            ));
        }
        let mut p = Patient::new(id, e.display_name.get_ref().clone(), e.doctor_phone.get_ref().clone());
        if let Err(err) = p.validate() {
            let span = match err.field.as_str() {
                "display_name" => e.display_name.span(),
                "doctor_phone" => e.doctor_phone.span(),
                _ => span.clone(),
            };
            return Err(ConfigError::from_validation(text, span, err));
        }
        for th in e.thresholds {
            let th_span = th.span();
            let th = th.into_inner();
            let metric: Metric = th.metric.get_ref().parse().map_err(|_| {
                ConfigError::at(text, th.metric.span(), "metric", format!("unknown metric `{}`", th.metric.get_ref()))
            })?;
            if !metric.is_monitored() {
                return Err(ConfigError::at(
                    text,
                    th.metric.span(),
                    "metric",
                    format!("{} readings are not range-checked", metric.as_str()),
                ));
            }
            let mut v = VitalThresholds::new(metric, *th.low.get_ref(), *th.high.get_ref());
            if let Some(d) = &th.debounce_window_s {
                v.debounce_window_s = *d.get_ref();
            }
            if let Some(r) = &th.resolve_after {
                v.resolve_after = *r.get_ref();
            }
            v.validate().map_err(|err| {
                let span = match err.field.as_str() {
                    "low" => th.low.span(),
                    "high" => th.high.span(),
                    "debounce_window_s" => th.debounce_window_s.as_ref().map_or(th_span.clone(), |d| d.span()),
                    "resolve_after" => th.resolve_after.as_ref().map_or(th_span.clone(), |r| r.span()),
                    _ => th_span.clone(),
                };
                ConfigError::from_validation(text, span, err)
            })?;
            p.thresholds.insert(metric, v);
        }
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = r#"
[[patient]]
patient_id = 1
display_name = "P001"
doctor_phone = "+15551234567"

[[patient.thresholds]]
metric = "temperature"
low = 35.5
high = 38.5

[[patient]]
patient_id = 2
display_name = "P002"
doctor_phone = "+15557654321"
"#;

    #[test]
    fn loads_with_defaults() {
        let ps = load_patients(TWO).unwrap();
        assert_eq!(ps.len(), 2);
        let t = &ps[0].thresholds[&Metric::Temperature];
        assert_eq!((t.low, t.high), (35.5, 38.5));
        assert_eq!(t.resolve_after, 3);
        let hr = &ps[1].thresholds[&Metric::HeartRate];
        assert_eq!((hr.low, hr.high), (60.0, 100.0));
    }

    #[test]
    fn bad_phone_names_field_and_line() {
        let text = TWO.replace("+15557654321", "5557654321");
        let e = load_patients(&text).unwrap_err();
        assert_eq!(e.field, "doctor_phone");
        assert_eq!(e.line, Some(15));
    }

    #[test]
    fn inverted_range_names_low() {
        let text = TWO.replace("low = 35.5", "low = 39.0");
        let e = load_patients(&text).unwrap_err();
        assert_eq!(e.field, "low");
        assert_eq!(e.line, Some(9));
    }

    #[test]
    fn type_error_names_key() {
        let text = TWO.replace("patient_id = 2", "patient_id = \"two\"");
        let e = load_patients(&text).unwrap_err();
        assert_eq!(e.field, "patient_id");
        assert_eq!(e.line, Some(13));
    }

    #[test]
    fn unknown_key_rejected() {
        let text = TWO.replace("high = 38.5", "high = 38.5\nhihg = 1");
        let e = load_patients(&text).unwrap_err();
        assert_eq!(e.field, "hihg");
    }

    #[test]
    fn duplicate_patient() {
        let text = TWO.replace("patient_id = 2", "patient_id = 1");
        assert_eq!(load_patients(&text).unwrap_err().field, "patient_id");
    }

    #[test]
    fn ecg_thresholds_rejected() {
        let text = TWO.replace("metric = \"temperature\"", "metric = \"ecg\"");
        assert_eq!(load_patients(&text).unwrap_err().field, "metric");
    }
}
