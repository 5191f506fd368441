//! SMS alerts through a SIM900-style modem in text mode.
//!
//! One send is the dialogue
//!
//! ```text
//! AT\r                      -> OK
//! AT+CMGF=1\r               -> OK
//! AT+CMGS="<phone>"\r       -> "> "
//! <body> 0x1A               -> +CMGS: <ref>  OK
//! ```
//!
//! Any stage may time out or answer `ERROR`; the whole dialogue is then
//! retried with doubling backoff. A send aborted after `AT+CMGS` is always
//! cancelled with ESC (0x1B) so the modem is back in command mode.

mod mock;

pub use mock::{Behavior, MockModem, ModemScript, Reply, SentMessage};

use std::fmt;
use std::io;
use std::time::Duration;

use futures::future::BoxFuture;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::time::Instant;

use crate::clock::Clock;
use crate::model::{Alert, Patient};

pub const CTRL_Z: u8 = 0x1A;
pub const ESC: u8 = 0x1B;
pub const MAX_BODY_LEN: usize = 160;

/// Characters shared by ASCII and the GSM 03.38 default alphabet (no
/// escape-table characters).
pub fn is_sms_safe(c: char) -> bool {
    c.is_ascii_alphanumeric()
        || c == ' '
        || c == '\n'
        || c == '\r'
        || "!\"#$%&'()*+,-./:;<=>?@_".contains(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ToModem,
    FromModem,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub attempt: u32,
    pub direction: Direction,
    #[serde(with = "hex_bytes")]
    pub bytes: Vec<u8>,
    /// Simulated milliseconds since the dialogue started.
    pub at_ms: u64,
}

/// Verbatim record of the bytes exchanged with a modem.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtTranscript {
    pub entries: Vec<TranscriptEntry>,
    /// Set by the mock when it received input it had no script for.
    #[serde(default)]
    pub flagged: bool,
}

impl AtTranscript {
    pub fn push(&mut self, attempt: u32, direction: Direction, bytes: &[u8], at_ms: u64) {
        self.entries.push(TranscriptEntry {
            attempt,
            direction,
            bytes: bytes.to_vec(),
            at_ms,
        });
    }

    /// Bytes per direction with consecutive same-direction chunks merged, so
    /// the result does not depend on how the transport split reads.
    pub fn dialogue(&self) -> Vec<(Direction, Vec<u8>)> {
        let mut out: Vec<(Direction, Vec<u8>)> = Vec::new();
        for e in &self.entries {
            match out.last_mut() {
                Some((d, bytes)) if *d == e.direction => bytes.extend_from_slice(&e.bytes),
                _ => out.push((e.direction, e.bytes.clone())),
            }
        }
        out
    }

    pub fn attempts(&self) -> u32 {
        self.entries.iter().map(|e| e.attempt).max().unwrap_or(0)
    }

    /// Entries of one attempt as a separate transcript.
    pub fn attempt(&self, n: u32) -> AtTranscript {
        AtTranscript {
            entries: self.entries.iter().filter(|e| e.attempt == n).cloned().collect(),
            flagged: self.flagged,
        }
    }

    /// Annotated hex dump, one line per direction change:
    /// `TX 41 54 0D ; AT\r`.
    pub fn to_annotated_hex(&self) -> String {
        let mut s = String::new();
        for (d, bytes) in self.dialogue() {
            s.push_str(&format_hex_line(d, &bytes));
            s.push('\n');
        }
        s
    }
}

fn format_hex_line(d: Direction, bytes: &[u8]) -> String {
    let tag = match d {
        Direction::ToModem => "TX",
        Direction::FromModem => "RX",
    };
    format!("{tag} {} ; {}", crate::wire::hex(bytes), printable(bytes))
}

/// Renders bytes with C-style escapes for control characters.
pub fn printable(bytes: &[u8]) -> String {
    let mut s = String::new();
    for &b in bytes {
        match b {
            b'\r' => s.push_str("\\r"),
            b'\n' => s.push_str("\\n"),
            0x20..=0x7E => s.push(b as char),
            _ => s.push_str(&format!("\\x{b:02X}")),
        }
    }
    s
}

/// Parses an annotated hex dump. Blank lines and `#` comments are skipped;
/// text after `;` on a line is annotation.
pub fn parse_annotated_hex(text: &str) -> Result<Vec<(Direction, Vec<u8>)>, String> {
    let mut out: Vec<(Direction, Vec<u8>)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split(';').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let dir = match parts.next() {
            Some("TX") => Direction::ToModem,
            Some("RX") => Direction::FromModem,
            other => return Err(format!("line {}: expected TX or RX, got {other:?}", n + 1)),
        };
        let mut bytes = Vec::new();
        for tok in parts {
            let b = u8::from_str_radix(tok, 16)
                .map_err(|e| format!("line {}: bad hex `{tok}`: {e}", n + 1))?;
            bytes.push(b);
        }
        match out.last_mut() {
            Some((d, prev)) if *d == dir => prev.extend(bytes),
            _ => out.push((dir, bytes)),
        }
    }
    Ok(out)
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        let mut out = String::with_capacity(bytes.len() * 2);
        for b in bytes {
            out.push_str(&format!("{b:02x}"));
        }
        s.serialize_str(&out)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        if s.len() % 2 != 0 {
            return Err(serde::de::Error::custom("odd-length hex string"));
        }
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(serde::de::Error::custom))
            .collect()
    }
}

/// Dialogue stage, named after the command that opens it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// `AT`
    Attention,
    /// `AT+CMGF=1`
    TextMode,
    /// `AT+CMGS="..."`, waiting for the `> ` prompt
    Recipient,
    /// message body and Ctrl-Z, waiting for `+CMGS: <ref>`
    Body,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Attention => "AT",
            Stage::TextMode => "CMGF",
            Stage::Recipient => "CMGS",
            Stage::Body => "BODY",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum SendResult {
    Sent { reference: u16 },
    Failed { stage: Stage, attempts: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmsOutcome {
    pub result: SendResult,
    pub attempts: u32,
    pub transcript: AtTranscript,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmsConfig {
    /// Per-stage response timeout, simulated time.
    pub stage_timeout: Duration,
    pub max_attempts: u32,
    /// Backoff before the second attempt; doubles for each later one.
    pub initial_backoff: Duration,
}

impl Default for SmsConfig {
    fn default() -> Self {
        Self {
            stage_timeout: Duration::from_secs(5),
            max_attempts: 3,
            initial_backoff: Duration::from_secs(2),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SmsError {
    #[error("message body is {0} characters; the limit is {MAX_BODY_LEN}")]
    BodyTooLong(usize),
    #[error("message body contains {0:?}, which is outside the GSM-safe ASCII subset")]
    BodyCharset(char),
    #[error("`{0}` is not an E.164 phone number")]
    Phone(String),
}

pub fn check_message(phone: &str, body: &str) -> Result<(), SmsError> {
    if !crate::model::is_e164(phone) {
        return Err(SmsError::Phone(phone.to_string()));
    }
    let len = body.chars().count();
    if len > MAX_BODY_LEN {
        return Err(SmsError::BodyTooLong(len));
    }
    if let Some(c) = body.chars().find(|&c| !is_sms_safe(c)) {
        return Err(SmsError::BodyCharset(c));
    }
    Ok(())
}

#[derive(Debug)]
enum StageFailure {
    Timeout,
    ErrorReply,
    Io(io::Error),
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageFailure::Timeout => f.write_str("timed out"),
            StageFailure::ErrorReply => f.write_str("modem answered ERROR"),
            StageFailure::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

#[derive(Debug, PartialEq)]
enum Token {
    Line(String),
    Prompt,
}

struct Session<'a, T: ?Sized> {
    io: &'a mut T,
    clock: &'a dyn Clock,
    transcript: &'a mut AtTranscript,
    started: Instant,
    attempt: u32,
    buf: Vec<u8>,
}

impl<T: AsyncRead + AsyncWrite + Unpin + ?Sized> Session<'_, T> {
    fn sim_ms(&self) -> u64 {
        let wall = self.started.elapsed();
        (wall.as_secs_f64() * self.clock.acceleration() * 1000.0) as u64
    }

    async fn send(&mut self, bytes: &[u8]) -> Result<(), StageFailure> {
        let at = self.sim_ms();
        self.transcript.push(self.attempt, Direction::ToModem, bytes, at);
        self.io.write_all(bytes).await.map_err(StageFailure::Io)?;
        self.io.flush().await.map_err(StageFailure::Io)
    }

    fn next_token(&mut self) -> Option<Token> {
        loop {
            let skip = self.buf.iter().take_while(|&&b| b == b'\r' || b == b'\n').count();
            self.buf.drain(..skip);
            if self.buf.is_empty() {
                return None;
            }
            if self.buf.starts_with(b"> ") {
                self.buf.drain(..2);
                return Some(Token::Prompt);
            }
            if self.buf == b">" {
                return None;
            }
            let end = self.buf.windows(2).position(|w| w == b"\r\n")?;
            let line: Vec<u8> = self.buf.drain(..end + 2).take(end).collect();
            let line = String::from_utf8_lossy(&line).trim().to_string();
            if !line.is_empty() {
                return Some(Token::Line(line));
            }
        }
    }

    /// Waits for a token accepted by `want`, skipping unrelated output.
    async fn expect<R>(
        &mut self,
        timeout: Duration,
        mut want: impl FnMut(&Token) -> Option<R>,
    ) -> Result<R, StageFailure> {
        let deadline = Instant::now() + self.clock.wall(timeout);
        loop {
            while let Some(tok) = self.next_token() {
                if let Token::Line(l) = &tok {
                    if l == "ERROR" || l.starts_with("+CMS ERROR") || l.starts_with("+CME ERROR") {
                        return Err(StageFailure::ErrorReply);
                    }
                }
                if let Some(r) = want(&tok) {
                    return Ok(r);
                }
            }
            let mut chunk = [0u8; 256];
            let n = match tokio::time::timeout_at(deadline, self.io.read(&mut chunk)).await {
                Err(_) => return Err(StageFailure::Timeout),
                Ok(Err(e)) => return Err(StageFailure::Io(e)),
                Ok(Ok(0)) => {
                    return Err(StageFailure::Io(io::Error::new(
                        io::ErrorKind::UnexpectedEof,
                        "modem closed the connection",
                    )))
                }
                Ok(Ok(n)) => n,
            };
            let at = self.sim_ms();
            self.transcript
                .push(self.attempt, Direction::FromModem, &chunk[..n], at);
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }

    async fn expect_ok(&mut self, timeout: Duration) -> Result<(), StageFailure> {
        self.expect(timeout, |t| matches!(t, Token::Line(l) if l == "OK").then_some(()))
            .await
    }

    async fn run_attempt(
        &mut self,
        phone: &str,
        body: &str,
        cfg: &SmsConfig,
    ) -> Result<u16, (Stage, StageFailure)> {
        let t = cfg.stage_timeout;
        self.send(b"AT\r").await.map_err(|e| (Stage::Attention, e))?;
        self.expect_ok(t).await.map_err(|e| (Stage::Attention, e))?;

        self.send(b"AT+CMGF=1\r").await.map_err(|e| (Stage::TextMode, e))?;
        self.expect_ok(t).await.map_err(|e| (Stage::TextMode, e))?;

        let cmd = format!("AT+CMGS=\"{phone}\"\r");
        self.send(cmd.as_bytes()).await.map_err(|e| (Stage::Recipient, e))?;
        self.expect(t, |tok| (*tok == Token::Prompt).then_some(()))
            .await
            .map_err(|e| (Stage::Recipient, e))?;

        let mut msg = body.as_bytes().to_vec();
        msg.push(CTRL_Z);
        self.send(&msg).await.map_err(|e| (Stage::Body, e))?;
        let reference = self
            .expect(t, |tok| match tok {
                Token::Line(l) => l
                    .strip_prefix("+CMGS:")
                    .and_then(|r| r.trim().parse::<u16>().ok()),
                Token::Prompt => None,
            })
            .await
            .map_err(|e| (Stage::Body, e))?;
        self.expect_ok(t).await.map_err(|e| (Stage::Body, e))?;
        Ok(reference)
    }
}

/// Runs the text-mode send dialogue over `modem`, retrying per `cfg`.
///
/// Precondition failures are returned before any byte is written. Stage
/// failures are reported inside the outcome, never as `Err`.
pub async fn send_sms<T>(
    phone: &str,
    body: &str,
    modem: &mut T,
    clock: &dyn Clock,
    cfg: &SmsConfig,
) -> Result<SmsOutcome, SmsError>
where
    T: AsyncRead + AsyncWrite + Unpin + ?Sized,
{
    check_message(phone, body)?;
    let mut transcript = AtTranscript::default();
    let mut session = Session {
        io: modem,
        clock,
        transcript: &mut transcript,
        started: Instant::now(),
        attempt: 0,
        buf: Vec::new(),
    };
    let attempts = cfg.max_attempts.max(1);
    let mut last_stage = Stage::Attention;
    for attempt in 1..=attempts {
        session.attempt = attempt;
        session.buf.clear();
        match session.run_attempt(phone, body, cfg).await {
            Ok(reference) => {
                return Ok(SmsOutcome {
                    result: SendResult::Sent { reference },
                    attempts: attempt,
                    transcript,
                })
            }
            Err((stage, failure)) => {
                tracing::warn!(attempt, %stage, %failure, "sms attempt failed");
                last_stage = stage;
                if matches!(stage, Stage::Recipient | Stage::Body) {
                    let _ = session.send(&[ESC]).await;
                }
                if attempt < attempts {
                    let backoff = cfg.initial_backoff * 2u32.pow(attempt - 1);
                    tokio::time::sleep(clock.wall(backoff)).await;
                }
            }
        }
    }
    Ok(SmsOutcome {
        result: SendResult::Failed {
            stage: last_stage,
            attempts,
        },
        attempts,
        transcript,
    })
}

/// `ALERT <patient> <METRIC> <value><unit> <HIGH|LOW> (limit <bound><unit>) <time>`
pub fn format_alert_message(alert: &Alert, patient: &Patient) -> String {
    let unit = alert.metric.unit().symbol();
    let time = alert
        .created_at
        .to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    let tail = format!(
        " {} {:.1}{unit} {} (limit {:.1}{unit}) {time}",
        alert.metric.label(),
        alert.observed_value,
        alert.breached_bound,
        alert.limit,
    );
    let name: String = patient
        .display_name
        .chars()
        .filter(|&c| is_sms_safe(c) && c != '\r' && c != '\n')
        .collect();
    let room = MAX_BODY_LEN.saturating_sub("ALERT ".len() + tail.len());
    let name: String = name.chars().take(room).collect();
    format!("ALERT {name}{tail}")
}

/// Boxed bidirectional byte stream to a modem.
pub trait ModemIo: AsyncRead + AsyncWrite + Unpin + Send {}
impl<T: AsyncRead + AsyncWrite + Unpin + Send> ModemIo for T {}

/// Opens a fresh modem connection per SMS job.
pub trait ModemConnector: Send + Sync + fmt::Debug {
    fn connect(&self) -> BoxFuture<'_, io::Result<Box<dyn ModemIo>>>;
}

/// Modem reachable over TCP (a serial-to-TCP bridge or the mock server).
#[derive(Debug, Clone)]
pub struct TcpModem {
    pub addr: String,
}

impl ModemConnector for TcpModem {
    fn connect(&self) -> BoxFuture<'_, io::Result<Box<dyn ModemIo>>> {
        Box::pin(async move {
            let s = tokio::net::TcpStream::connect(&self.addr).await?;
            s.set_nodelay(true)?;
            Ok(Box::new(s) as Box<dyn ModemIo>)
        })
    }
}
