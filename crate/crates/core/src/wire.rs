//! XBee API-mode framing and the 8-byte telemetry record carried inside it.
//!
//! ```text
//! ┌──────┬─────────────┬────────────┬───────────────────┬──────────┐
//! │ 0x7E │ length (BE) │ frame type │ frame-type body   │ checksum │
//! │  1   │      2      │     1      │  length - 1       │    1     │
//! └──────┴─────────────┴────────────┴───────────────────┴──────────┘
//! ```
//!
//! The checksum is `0xFF - (sum of frame-data bytes mod 256)`, where frame
//! data is the frame type plus its body. In escaped mode (Digi `AP=2`) every
//! byte after the delimiter that is one of `0x7E 0x7D 0x11 0x13` is sent as
//! `0x7D, byte ^ 0x20`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const START_DELIMITER: u8 = 0x7E;
pub const ESCAPE: u8 = 0x7D;
pub const XON: u8 = 0x11;
pub const XOFF: u8 = 0x13;
const ESCAPE_XOR: u8 = 0x20;

/// Largest frame-data region (frame type + body) the 16-bit length can carry.
pub const MAX_FRAME_DATA: usize = 0xFFFF;

pub const FRAME_TYPE_TRANSMIT_REQUEST: u8 = 0x10;
pub const FRAME_TYPE_RECEIVE_PACKET: u8 = 0x90;

pub const PAYLOAD_VERSION: u8 = 0x01;
pub const PAYLOAD_LEN: usize = 8;

/// Whether the byte stream uses API escaping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApiMode {
    /// `AP=1`: no escaping; 0x7E may appear inside frame data.
    #[default]
    Unescaped,
    /// `AP=2`: control bytes escaped with 0x7D.
    Escaped,
}

impl ApiMode {
    pub fn from_escaped(escaped: bool) -> Self {
        if escaped {
            ApiMode::Escaped
        } else {
            ApiMode::Unescaped
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("invalid frame: checksum over empty frame data")]
    EmptyFrameData,
    #[error("frame data of {len} bytes exceeds the 16-bit length field")]
    LengthOverflow { len: usize },
}

/// Problems found while scanning a byte stream. Offsets are absolute positions
/// in the stream as seen by the decoder.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("{len} noise bytes skipped at offset {offset}")]
    Noise { offset: u64, len: u64 },
    #[error("checksum mismatch at offset {offset}: expected {expected:#04x}, found {found:#04x}")]
    Checksum { offset: u64, expected: u8, found: u8 },
    #[error("zero-length frame at offset {offset}")]
    ZeroLength { offset: u64 },
    #[error("frame at offset {offset} cut short by a delimiter at offset {delimiter}")]
    Truncated { offset: u64, delimiter: u64 },
}

impl FrameError {
    pub fn offset(&self) -> u64 {
        match *self {
            FrameError::Noise { offset, .. }
            | FrameError::Checksum { offset, .. }
            | FrameError::ZeroLength { offset }
            | FrameError::Truncated { offset, .. } => offset,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PayloadError {
    #[error("telemetry payload must be {PAYLOAD_LEN} bytes, got {0}")]
    Length(usize),
    #[error("unsupported telemetry payload version {0:#04x}")]
    Version(u8),
    #[error("unknown metric code {0:#04x}")]
    Metric(u8),
    #[error("frame type {found:#04x} where {expected:#04x} was expected")]
    FrameType { expected: u8, found: u8 },
    #[error("frame body of {len} bytes is shorter than the {min}-byte header")]
    ShortBody { len: usize, min: usize },
}

/// Returns `0xFF - (sum(frame_data) mod 256)`.
pub fn compute_checksum(frame_data: &[u8]) -> Result<u8, EncodeError> {
    if frame_data.is_empty() {
        return Err(EncodeError::EmptyFrameData);
    }
    Ok(checksum_unchecked(frame_data))
}

fn checksum_unchecked(frame_data: &[u8]) -> u8 {
    let sum = frame_data.iter().fold(0u8, |acc, b| acc.wrapping_add(*b));
    0xFF - sum
}

/// One API frame: the frame type byte plus its type-specific body.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ApiFrame {
    pub frame_type: u8,
    pub body: Vec<u8>,
}

impl ApiFrame {
    pub fn new(frame_type: u8, body: impl Into<Vec<u8>>) -> Self {
        Self {
            frame_type,
            body: body.into(),
        }
    }

    /// Length of the frame-data region (frame type + body).
    pub fn data_len(&self) -> usize {
        1 + self.body.len()
    }

    pub fn frame_data(&self) -> Vec<u8> {
        let mut data = Vec::with_capacity(self.data_len());
        data.push(self.frame_type);
        data.extend_from_slice(&self.body);
        data
    }

    pub fn checksum(&self) -> u8 {
        let sum = self
            .body
            .iter()
            .fold(self.frame_type, |acc, b| acc.wrapping_add(*b));
        0xFF - sum
    }
}

fn needs_escape(b: u8) -> bool {
    matches!(b, START_DELIMITER | ESCAPE | XON | XOFF)
}

fn push_byte(out: &mut Vec<u8>, b: u8, mode: ApiMode) {
    if mode == ApiMode::Escaped && needs_escape(b) {
        out.push(ESCAPE);
        out.push(b ^ ESCAPE_XOR);
    } else {
        out.push(b);
    }
}

/// Encodes a frame: delimiter, big-endian length, frame data, checksum.
pub fn encode_frame(frame: &ApiFrame, mode: ApiMode) -> Result<Vec<u8>, EncodeError> {
    let len = frame.data_len();
    if len > MAX_FRAME_DATA {
        return Err(EncodeError::LengthOverflow { len });
    }
    let mut out = Vec::with_capacity(len + 4);
    out.push(START_DELIMITER);
    let [hi, lo] = (len as u16).to_be_bytes();
    push_byte(&mut out, hi, mode);
    push_byte(&mut out, lo, mode);
    push_byte(&mut out, frame.frame_type, mode);
    for &b in &frame.body {
        push_byte(&mut out, b, mode);
    }
    push_byte(&mut out, frame.checksum(), mode);
    Ok(out)
}

/// Result of a one-shot [`decode_stream`] call.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DecodeOutcome {
    pub frames: Vec<ApiFrame>,
    /// Bytes of the input that were fully processed; the rest is a trailing
    /// partial frame to be retried once more bytes arrive.
    pub consumed: usize,
    pub errors: Vec<FrameError>,
}

/// Decodes every complete frame in `buffer`.
pub fn decode_stream(buffer: &[u8], mode: ApiMode) -> DecodeOutcome {
    let mut decoder = FrameDecoder::new(mode);
    decoder.feed(buffer);
    let mut outcome = DecodeOutcome::default();
    while let Some(event) = decoder.next_event() {
        match event {
            DecodeEvent::Frame(f) => outcome.frames.push(f),
            DecodeEvent::Error(e) => outcome.errors.push(e),
        }
    }
    if let Some(e) = decoder.flush_noise() {
        outcome.errors.push(e);
    }
    outcome.consumed = buffer.len() - decoder.buffered();
    outcome
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeEvent {
    Frame(ApiFrame),
    Error(FrameError),
}

enum Parse {
    Complete { frame: ApiFrame, end: usize },
    Incomplete,
    Invalid { error: FrameError, resume: usize },
}

/// Incremental decoder for a byte-stream transport.
///
/// Noise runs are coalesced and reported when the next delimiter shows up, so
/// the sequence of events does not depend on how the input was chunked.
#[derive(Debug)]
pub struct FrameDecoder {
    mode: ApiMode,
    buf: Vec<u8>,
    pos: usize,
    // absolute stream offset of buf[0]
    base: u64,
    noise_start: Option<u64>,
}

impl FrameDecoder {
    pub fn new(mode: ApiMode) -> Self {
        Self {
            mode,
            buf: Vec::new(),
            pos: 0,
            base: 0,
            noise_start: None,
        }
    }

    pub fn mode(&self) -> ApiMode {
        self.mode
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        if self.pos > 0 && self.pos * 2 >= self.buf.len() {
            self.buf.drain(..self.pos);
            self.base += self.pos as u64;
            self.pos = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes held back as an incomplete frame.
    pub fn buffered(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Reports any noise run still pending at end of stream.
    pub fn flush_noise(&mut self) -> Option<FrameError> {
        self.noise_start.take().map(|offset| FrameError::Noise {
            offset,
            len: self.base + self.pos as u64 - offset,
        })
    }

    pub fn next_event(&mut self) -> Option<DecodeEvent> {
        if self.pos >= self.buf.len() {
            return None;
        }
        if self.buf[self.pos] != START_DELIMITER {
            let abs = self.base + self.pos as u64;
            self.noise_start.get_or_insert(abs);
            match self.buf[self.pos..].iter().position(|&b| b == START_DELIMITER) {
                Some(skip) => self.pos += skip,
                None => {
                    self.pos = self.buf.len();
                    return None;
                }
            }
        }
        if let Some(noise) = self.flush_noise() {
            return Some(DecodeEvent::Error(noise));
        }
        match self.parse_at(self.pos) {
            Parse::Complete { frame, end } => {
                self.pos = end;
                Some(DecodeEvent::Frame(frame))
            }
            Parse::Incomplete => None,
            Parse::Invalid { error, resume } => {
                self.pos = resume;
                if self.pos < self.buf.len() && self.buf[self.pos] != START_DELIMITER {
                    self.noise_start = Some(self.base + self.pos as u64);
                }
                Some(DecodeEvent::Error(error))
            }
        }
    }

    fn parse_at(&self, start: usize) -> Parse {
        let offset = self.base + start as u64;
        let mut cursor = Cursor {
            buf: &self.buf,
            pos: start + 1,
            mode: self.mode,
        };
        let take = |cursor: &mut Cursor| -> Result<u8, Parse> {
            match cursor.next() {
                Step::Byte(b) => Ok(b),
                Step::End => Err(Parse::Incomplete),
                Step::Delimiter(at) => Err(Parse::Invalid {
                    error: FrameError::Truncated {
                        offset,
                        delimiter: self.base + at as u64,
                    },
                    resume: at,
                }),
            }
        };
        let hi = match take(&mut cursor) {
            Ok(b) => b,
            Err(p) => return p,
        };
        let lo = match take(&mut cursor) {
            Ok(b) => b,
            Err(p) => return p,
        };
        let len = u16::from_be_bytes([hi, lo]) as usize;
        if len == 0 {
            return Parse::Invalid {
                error: FrameError::ZeroLength { offset },
                resume: start + 1,
            };
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            match take(&mut cursor) {
                Ok(b) => data.push(b),
                Err(p) => return p,
            }
        }
        let found = match take(&mut cursor) {
            Ok(b) => b,
            Err(p) => return p,
        };
        let expected = checksum_unchecked(&data);
        if found != expected {
            return Parse::Invalid {
                error: FrameError::Checksum {
                    offset,
                    expected,
                    found,
                },
                resume: start + 1,
            };
        }
        let frame_type = data[0];
        data.remove(0);
        Parse::Complete {
            frame: ApiFrame {
                frame_type,
                body: data,
            },
            end: cursor.pos,
        }
    }
}

enum Step {
    Byte(u8),
    End,
    Delimiter(usize),
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    mode: ApiMode,
}

impl Cursor<'_> {
    fn next(&mut self) -> Step {
        let Some(&b) = self.buf.get(self.pos) else {
            return Step::End;
        };
        if self.mode == ApiMode::Unescaped {
            self.pos += 1;
            return Step::Byte(b);
        }
        match b {
            START_DELIMITER => Step::Delimiter(self.pos),
            ESCAPE => match self.buf.get(self.pos + 1) {
                None => Step::End,
                Some(&START_DELIMITER) => Step::Delimiter(self.pos + 1),
                Some(&next) => {
                    self.pos += 2;
                    Step::Byte(next ^ ESCAPE_XOR)
                }
            },
            _ => {
                self.pos += 1;
                Step::Byte(b)
            }
        }
    }
}

/// Sensor channel carried in a telemetry record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Temperature,
    HeartRate,
    Ecg,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Temperature, Metric::HeartRate, Metric::Ecg];

    pub fn code(self) -> u8 {
        match self {
            Metric::Temperature => 0x01,
            Metric::HeartRate => 0x02,
            Metric::Ecg => 0x03,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, PayloadError> {
        match code {
            0x01 => Ok(Metric::Temperature),
            0x02 => Ok(Metric::HeartRate),
            0x03 => Ok(Metric::Ecg),
            other => Err(PayloadError::Metric(other)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Temperature => "temperature",
            Metric::HeartRate => "heart_rate",
            Metric::Ecg => "ecg",
        }
    }

    /// Engineering units per wire count.
    pub fn scale(self) -> f64 {
        match self {
            // centi-degrees Celsius
            Metric::Temperature => 0.01,
            Metric::HeartRate => 1.0,
            // microvolts -> millivolts
            Metric::Ecg => 0.001,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "temperature" | "temp" => Ok(Metric::Temperature),
            "heart_rate" | "heartrate" | "hr" | "bpm" => Ok(Metric::HeartRate),
            "ecg" | "ecg_sample" => Ok(Metric::Ecg),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

/// The fixed 8-byte application record:
/// `version | patient_id (BE) | metric | sequence (BE) | raw_value (BE, signed)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TelemetryPayload {
    pub patient_id: u16,
    pub metric: Metric,
    pub sequence: u16,
    pub raw_value: i16,
}

impl TelemetryPayload {
    pub fn encode(&self) -> [u8; PAYLOAD_LEN] {
        let mut out = [0u8; PAYLOAD_LEN];
        out[0] = PAYLOAD_VERSION;
        out[1..3].copy_from_slice(&self.patient_id.to_be_bytes());
        out[3] = self.metric.code();
        out[4..6].copy_from_slice(&self.sequence.to_be_bytes());
        out[6..8].copy_from_slice(&self.raw_value.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PayloadError> {
        if bytes.len() != PAYLOAD_LEN {
            return Err(PayloadError::Length(bytes.len()));
        }
        if bytes[0] != PAYLOAD_VERSION {
            return Err(PayloadError::Version(bytes[0]));
        }
        Ok(Self {
            patient_id: u16::from_be_bytes([bytes[1], bytes[2]]),
            metric: Metric::from_code(bytes[3])?,
            sequence: u16::from_be_bytes([bytes[4], bytes[5]]),
            raw_value: i16::from_be_bytes([bytes[6], bytes[7]]),
        })
    }

    /// Value in engineering units (°C, BPM or mV).
    pub fn value(&self) -> f64 {
        f64::from(self.raw_value) * self.metric.scale()
    }
}

pub fn encode_payload(p: &TelemetryPayload) -> [u8; PAYLOAD_LEN] {
    p.encode()
}

pub fn decode_payload(bytes: &[u8]) -> Result<TelemetryPayload, PayloadError> {
    TelemetryPayload::decode(bytes)
}

/// Frame type 0x90, ZigBee receive packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceivePacket {
    pub source_addr64: u64,
    pub source_addr16: u16,
    pub receive_options: u8,
    pub rf_data: Vec<u8>,
}

impl ReceivePacket {
    const HEADER: usize = 11;

    pub fn to_frame(&self) -> ApiFrame {
        let mut body = Vec::with_capacity(Self::HEADER + self.rf_data.len());
        body.extend_from_slice(&self.source_addr64.to_be_bytes());
        body.extend_from_slice(&self.source_addr16.to_be_bytes());
        body.push(self.receive_options);
        body.extend_from_slice(&self.rf_data);
        ApiFrame::new(FRAME_TYPE_RECEIVE_PACKET, body)
    }

    pub fn from_frame(frame: &ApiFrame) -> Result<Self, PayloadError> {
        if frame.frame_type != FRAME_TYPE_RECEIVE_PACKET {
            return Err(PayloadError::FrameType {
                expected: FRAME_TYPE_RECEIVE_PACKET,
                found: frame.frame_type,
            });
        }
        let b = &frame.body;
        if b.len() < Self::HEADER {
            return Err(PayloadError::ShortBody {
                len: b.len(),
                min: Self::HEADER,
            });
        }
        Ok(Self {
            source_addr64: u64::from_be_bytes(b[0..8].try_into().expect("8 bytes")),
            source_addr16: u16::from_be_bytes([b[8], b[9]]),
            receive_options: b[10],
            rf_data: b[Self::HEADER..].to_vec(),
        })
    }
}

/// Frame type 0x10, ZigBee transmit request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransmitRequest {
    pub frame_id: u8,
    pub dest_addr64: u64,
    pub dest_addr16: u16,
    pub broadcast_radius: u8,
    pub options: u8,
    pub rf_data: Vec<u8>,
}

impl TransmitRequest {
    const HEADER: usize = 13;

    pub fn to_frame(&self) -> ApiFrame {
        let mut body = Vec::with_capacity(Self::HEADER + self.rf_data.len());
        body.push(self.frame_id);
        body.extend_from_slice(&self.dest_addr64.to_be_bytes());
        body.extend_from_slice(&self.dest_addr16.to_be_bytes());
        body.push(self.broadcast_radius);
        body.push(self.options);
        body.extend_from_slice(&self.rf_data);
        ApiFrame::new(FRAME_TYPE_TRANSMIT_REQUEST, body)
    }

    pub fn from_frame(frame: &ApiFrame) -> Result<Self, PayloadError> {
        if frame.frame_type != FRAME_TYPE_TRANSMIT_REQUEST {
            return Err(PayloadError::FrameType {
                expected: FRAME_TYPE_TRANSMIT_REQUEST,
                found: frame.frame_type,
            });
        }
        let b = &frame.body;
        if b.len() < Self::HEADER {
            return Err(PayloadError::ShortBody {
                len: b.len(),
                min: Self::HEADER,
            });
        }
        Ok(Self {
            frame_id: b[0],
            dest_addr64: u64::from_be_bytes(b[1..9].try_into().expect("8 bytes")),
            dest_addr16: u16::from_be_bytes([b[9], b[10]]),
            broadcast_radius: b[11],
            options: b[12],
            rf_data: b[Self::HEADER..].to_vec(),
        })
    }
}

/// Formats bytes as space-separated upper-case hex.
pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 3);
    for (i, b) in bytes.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format!("{b:02X}"));
    }
    s
}
