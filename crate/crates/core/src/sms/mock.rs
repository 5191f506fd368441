//! Scriptable SIM900 stand-in.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures::future::BoxFuture;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::TcpListener;
use tokio::time::Instant;

use super::{AtTranscript, Direction, ModemConnector, ModemIo, Stage, CTRL_Z, ESC};
use crate::clock::SharedClock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reply {
    /// The stage's success response (`OK`, the `> ` prompt, or `+CMGS`).
    Ok,
    Error,
    /// No response at all.
    Silent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Behavior {
    /// Simulated delay before replying.
    pub delay: Duration,
    pub reply: Reply,
}

impl Behavior {
    pub const OK: Behavior = Behavior {
        delay: Duration::ZERO,
        reply: Reply::Ok,
    };
    pub const ERROR: Behavior = Behavior {
        delay: Duration::ZERO,
        reply: Reply::Error,
    };
    pub const SILENT: Behavior = Behavior {
        delay: Duration::ZERO,
        reply: Reply::Silent,
    };

    pub fn delayed(delay: Duration, reply: Reply) -> Self {
        Self { delay, reply }
    }
}

/// Per-stage queues of behaviors; each time a stage is reached the next
/// queued behavior is used, falling back to `default` when the queue is empty.
#[derive(Debug, Clone)]
pub struct ModemScript {
    stages: BTreeMap<Stage, VecDeque<Behavior>>,
    default: Behavior,
    first_reference: u16,
}

impl Default for ModemScript {
    fn default() -> Self {
        Self::all_ok()
    }
}

impl ModemScript {
    pub fn all_ok() -> Self {
        Self {
            stages: BTreeMap::new(),
            default: Behavior::OK,
            first_reference: 1,
        }
    }

    pub fn with_default(mut self, b: Behavior) -> Self {
        self.default = b;
        self
    }

    /// Queues `b` for the next unscripted visit to `stage`.
    pub fn then(mut self, stage: Stage, b: Behavior) -> Self {
        self.stages.entry(stage).or_default().push_back(b);
        self
    }

    pub fn repeat(mut self, stage: Stage, b: Behavior, times: usize) -> Self {
        for _ in 0..times {
            self = self.then(stage, b);
        }
        self
    }

    pub fn starting_reference(mut self, r: u16) -> Self {
        self.first_reference = r;
        self
    }

    fn next(&mut self, stage: Stage) -> Behavior {
        self.stages
            .get_mut(&stage)
            .and_then(VecDeque::pop_front)
            .unwrap_or(self.default)
    }

    /// Rebuilds the modem side of a client transcript: every command gets
    /// the reply it got before (none at all when it timed out).
    pub fn from_transcript(t: &AtTranscript) -> Self {
        let mut script = Self::all_ok().with_default(Behavior::OK);
        let mut first_ref = None;
        let entries = &t.entries;
        let mut i = 0;
        while i < entries.len() {
            let e = &entries[i];
            i += 1;
            if e.direction != Direction::ToModem {
                continue;
            }
            let stage = match classify(&e.bytes) {
                Some(s) => s,
                None => continue,
            };
            let mut reply = Vec::new();
            while i < entries.len() && entries[i].direction == Direction::FromModem {
                reply.extend_from_slice(&entries[i].bytes);
                i += 1;
            }
            let text = String::from_utf8_lossy(&reply);
            let behavior = if text.contains("ERROR") {
                Behavior::ERROR
            } else if match stage {
                Stage::Recipient => text.contains("> "),
                Stage::Body => text.contains("+CMGS:") && text.contains("OK"),
                _ => text.contains("OK"),
            } {
                if stage == Stage::Body && first_ref.is_none() {
                    first_ref = text
                        .split("+CMGS:")
                        .nth(1)
                        .and_then(|r| r.split_whitespace().next())
                        .and_then(|r| r.parse::<u16>().ok());
                }
                Behavior::OK
            } else {
                Behavior::SILENT
            };
            script = script.then(stage, behavior);
        }
        if let Some(r) = first_ref {
            script.first_reference = r;
        }
        script
    }
}

fn classify(bytes: &[u8]) -> Option<Stage> {
    if bytes.last() == Some(&CTRL_Z) {
        return Some(Stage::Body);
    }
    let text = std::str::from_utf8(bytes).ok()?.trim();
    match text {
        "AT" => Some(Stage::Attention),
        "AT+CMGF=1" => Some(Stage::TextMode),
        t if t.starts_with("AT+CMGS=") => Some(Stage::Recipient),
        _ => None,
    }
}

/// A message the mock accepted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentMessage {
    pub phone: String,
    pub body: String,
    pub reference: u16,
}

#[derive(Debug)]
struct MockState {
    script: ModemScript,
    next_reference: u16,
    sessions: Vec<AtTranscript>,
    sent: Vec<SentMessage>,
}

/// In-process modem. Cloning shares the script and the recorded sessions.
#[derive(Clone)]
pub struct MockModem {
    state: Arc<Mutex<MockState>>,
    clock: SharedClock,
}

impl fmt::Debug for MockModem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockModem").finish_non_exhaustive()
    }
}

enum Mode {
    Command,
    Body { phone: String, text: Vec<u8> },
}

impl MockModem {
    pub fn new(script: ModemScript, clock: SharedClock) -> Self {
        let next_reference = script.first_reference;
        Self {
            state: Arc::new(Mutex::new(MockState {
                script,
                next_reference,
                sessions: Vec::new(),
                sent: Vec::new(),
            })),
            clock,
        }
    }

    /// Returns the client end of an in-memory link; the modem end is served
    /// on a spawned task.
    pub fn endpoint(&self) -> tokio::io::DuplexStream {
        let (client, modem) = tokio::io::duplex(4096);
        let me = self.clone();
        tokio::spawn(async move {
            if let Err(e) = me.serve(modem).await {
                tracing::debug!(error = %e, "mock modem session ended");
            }
        });
        client
    }

    /// Accepts connections one after another and serves each to completion.
    pub async fn serve_tcp(self, listener: TcpListener) -> io::Result<()> {
        loop {
            let (sock, _) = listener.accept().await?;
            sock.set_nodelay(true)?;
            if let Err(e) = self.serve(sock).await {
                tracing::debug!(error = %e, "mock modem session ended");
            }
        }
    }

    /// Modem-side transcripts, one per served session.
    pub fn sessions(&self) -> Vec<AtTranscript> {
        self.state.lock().expect("mock lock").sessions.clone()
    }

    pub fn sent(&self) -> Vec<SentMessage> {
        self.state.lock().expect("mock lock").sent.clone()
    }

    /// Serves one session until the peer closes the stream.
    pub async fn serve<T: AsyncRead + AsyncWrite + Unpin>(&self, mut io: T) -> io::Result<()> {
        let session = {
            let mut st = self.state.lock().expect("mock lock");
            st.sessions.push(AtTranscript::default());
            st.sessions.len() - 1
        };
        let started = Instant::now();
        let accel = self.clock.acceleration();
        let sim_ms = move || (started.elapsed().as_secs_f64() * accel * 1000.0) as u64;
        let record = |dir: Direction, bytes: &[u8], flag: bool| {
            let mut st = self.state.lock().expect("mock lock");
            let t = &mut st.sessions[session];
            t.push(1, dir, bytes, sim_ms());
            t.flagged |= flag;
        };

        let mut mode = Mode::Command;
        let mut line = Vec::new();
        let mut chunk = [0u8; 512];
        loop {
            let n = io.read(&mut chunk).await?;
            if n == 0 {
                return Ok(());
            }
            record(Direction::ToModem, &chunk[..n], false);
            for &b in &chunk[..n] {
                match &mut mode {
                    Mode::Body { phone, text } => match b {
                        CTRL_Z => {
                            let phone = std::mem::take(phone);
                            let body = String::from_utf8_lossy(text).into_owned();
                            mode = Mode::Command;
                            let reply = self.stage_reply(Stage::Body).await;
                            let out = match reply {
                                Reply::Ok => {
                                    let reference = {
                                        let mut st = self.state.lock().expect("mock lock");
                                        let r = st.next_reference;
                                        st.next_reference = r.wrapping_add(1);
                                        st.sent.push(SentMessage {
                                            phone,
                                            body,
                                            reference: r,
                                        });
                                        r
                                    };
                                    format!("\r\n+CMGS: {reference}\r\n\r\nOK\r\n").into_bytes()
                                }
                                Reply::Error => b"\r\nERROR\r\n".to_vec(),
                                Reply::Silent => Vec::new(),
                            };
                            self.write(&mut io, &out, &record).await?;
                        }
                        ESC => mode = Mode::Command,
                        _ => text.push(b),
                    },
                    Mode::Command => match b {
                        b'\r' => {
                            let cmd = String::from_utf8_lossy(&line).trim().to_string();
                            line.clear();
                            if let Some(next) = self.command(&cmd, &mut io, &record).await? {
                                mode = next;
                            }
                        }
                        b'\n' | ESC => {}
                        _ => line.push(b),
                    },
                }
            }
        }
    }

    async fn stage_reply(&self, stage: Stage) -> Reply {
        let b = self.state.lock().expect("mock lock").script.next(stage);
        if !b.delay.is_zero() {
            tokio::time::sleep(self.clock.wall(b.delay)).await;
        }
        b.reply
    }

    async fn write<T: AsyncWrite + Unpin>(
        &self,
        io: &mut T,
        bytes: &[u8],
        record: &impl Fn(Direction, &[u8], bool),
    ) -> io::Result<()> {
        if bytes.is_empty() {
            return Ok(());
        }
        record(Direction::FromModem, bytes, false);
        io.write_all(bytes).await?;
        io.flush().await
    }

    async fn command<T: AsyncWrite + Unpin>(
        &self,
        cmd: &str,
        io: &mut T,
        record: &impl Fn(Direction, &[u8], bool),
    ) -> io::Result<Option<Mode>> {
        if cmd.is_empty() {
            return Ok(None);
        }
        let stage = match cmd {
            "AT" => Stage::Attention,
            "AT+CMGF=1" => Stage::TextMode,
            c if c.starts_with("AT+CMGS=\"") && c.ends_with('"') && c.len() > 10 => {
                Stage::Recipient
            }
            _ => {
                record(Direction::FromModem, &[], true);
                self.write(io, b"\r\nERROR\r\n", record).await?;
                return Ok(None);
            }
        };
        let reply = self.stage_reply(stage).await;
        match (stage, reply) {
            (Stage::Recipient, Reply::Ok) => {
                self.write(io, b"\r\n> ", record).await?;
                let phone = cmd["AT+CMGS=\"".len()..cmd.len() - 1].to_string();
                Ok(Some(Mode::Body {
                    phone,
                    text: Vec::new(),
                }))
            }
            (_, Reply::Ok) => {
                self.write(io, b"\r\nOK\r\n", record).await?;
                Ok(None)
            }
            (_, Reply::Error) => {
                self.write(io, b"\r\nERROR\r\n", record).await?;
                Ok(None)
            }
            (_, Reply::Silent) => Ok(None),
        }
    }
}

impl ModemConnector for MockModem {
    fn connect(&self) -> BoxFuture<'_, io::Result<Box<dyn ModemIo>>> {
        Box::pin(async move { Ok(Box::new(self.endpoint()) as Box<dyn ModemIo>) })
    }
}
