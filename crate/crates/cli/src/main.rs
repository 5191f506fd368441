//! `vitalgate` command-line entry point.

mod export;
mod frames;
mod gateway;
mod modem;
mod replay;
mod sim;
mod store;

use std::fmt;
use std::io::IsTerminal;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vitalgate::config::ConfigError;
use vitalgate::store::{FsyncPolicy, StoreError};
use vitalgate::wire::Metric;

#[derive(Debug, Parser)]
#[command(name = "vitalgate", version, about = "Patient vitals telemetry gateway, simulator and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the gateway.
    #[command(subcommand)]
    Gateway(GatewayCommand),
    /// Run simulated sensor nodes.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Inspect captured XBee API frames.
    #[command(subcommand)]
    Frames(FramesCommand),
    /// Read from a gateway store.
    #[command(subcommand)]
    Store(StoreCommand),
    /// Re-feed historical readings through alert evaluation.
    Replay(ReplayArgs),
    /// Stand-alone GSM modem tools.
    #[command(subcommand)]
    Modem(ModemCommand),
}

#[derive(Debug, Subcommand)]
enum GatewayCommand {
    /// Ingest frames, store readings, raise alerts and serve the HTTP API.
    Run(GatewayRunArgs),
}

#[derive(Debug, Args)]
struct GatewayRunArgs {
    /// Address for the radio-bridge TCP listener.
    #[arg(long, env = "VITALGATE_LISTEN", default_value = "127.0.0.1:9750")]
    listen: SocketAddr,
    /// Address for the HTTP API.
    #[arg(long, env = "VITALGATE_HTTP", default_value = "127.0.0.1:8080")]
    http: SocketAddr,
    /// Store directory; created if missing.
    #[arg(long, env = "VITALGATE_STORE", default_value = "vitalgate-data")]
    store: PathBuf,
    /// Patient registry (TOML).
    #[arg(long, env = "VITALGATE_PATIENTS")]
    patients: PathBuf,
    /// GSM modem TCP address; the built-in mock modem is used when absent.
    #[arg(long, env = "VITALGATE_MODEM")]
    modem: Option<String>,
    /// Clock acceleration factor (1 = real time).
    #[arg(long, env = "VITALGATE_CLOCK_ACCEL", default_value_t = 1.0)]
    clock_accel: f64,
    /// Expect escaped API frames (AP=2).
    #[arg(long, env = "VITALGATE_ESCAPED")]
    escaped: bool,
    /// Store flush policy: always or never.
    #[arg(long, env = "VITALGATE_FSYNC", default_value = "always")]
    fsync: FsyncPolicy,
    /// Directory of dashboard files served at /.
    #[arg(long, env = "VITALGATE_STATIC_DIR")]
    static_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum SimCommand {
    /// Stream a scenario to a gateway.
    Run(SimRunArgs),
}

#[derive(Debug, Args)]
struct SimRunArgs {
    /// Scenario file (TOML).
    #[arg(long, env = "VITALGATE_SCENARIO")]
    scenario: PathBuf,
    /// Gateway ingest address.
    #[arg(long, env = "VITALGATE_CONNECT", default_value = "127.0.0.1:9750")]
    connect: String,
    /// Overrides the scenario's rng_seed.
    #[arg(long, env = "VITALGATE_SEED")]
    seed: Option<u64>,
    /// Write the emission report (JSON) here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum FramesCommand {
    /// Print frames as hex plus decoded fields.
    Inspect(FramesInspectArgs),
}

#[derive(Debug, Args)]
struct FramesInspectArgs {
    /// Capture file, or - for stdin.
    input: PathBuf,
    /// Input uses escaped API mode (AP=2).
    #[arg(long)]
    escaped: bool,
}

#[derive(Debug, Subcommand)]
enum StoreCommand {
    /// Print one patient's readings for a metric within [from, to).
    Query(StoreQueryArgs),
}

#[derive(Debug, Args)]
struct StoreQueryArgs {
    /// Store directory.
    #[arg(long, env = "VITALGATE_STORE", default_value = "vitalgate-data")]
    store: PathBuf,
    #[arg(long)]
    patient: u16,
    /// temperature, heart_rate or ecg.
    #[arg(long)]
    metric: Metric,
    /// Inclusive start, ISO-8601 UTC.
    #[arg(long)]
    from: String,
    /// Exclusive end, ISO-8601 UTC.
    #[arg(long)]
    to: String,
    /// Print CSV with a header row.
    #[arg(long)]
    csv: bool,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// readings.log, a store directory, or a CSV export.
    #[arg(long)]
    log: PathBuf,
    /// Replay speed relative to the recorded timestamps.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    /// Send SMS for alerts raised during the replay.
    #[arg(long)]
    live_alerts: bool,
    /// Patient registry (TOML); default thresholds are used when absent.
    #[arg(long, env = "VITALGATE_PATIENTS")]
    patients: Option<PathBuf>,
    /// GSM modem TCP address for --live-alerts; the built-in mock modem is used when absent.
    #[arg(long, env = "VITALGATE_MODEM")]
    modem: Option<String>,
}

#[derive(Debug, Subcommand)]
enum ModemCommand {
    /// Serve a scripted mock SIM900 modem over TCP.
    Mock(ModemMockArgs),
}

#[derive(Debug, Args)]
struct ModemMockArgs {
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1:9760")]
    listen: SocketAddr,
    /// Answer ERROR at this stage: at, cmgf, recipient or body.
    #[arg(long)]
    error_at: Option<String>,
    /// Number of consecutive errors for --error-at.
    #[arg(long, default_value_t = 1)]
    error_count: usize,
}

/// Failure with its exit-code class.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Io(String),
    Protocol(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Io(_) => 2,
            Failure::Protocol(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Protocol(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { .. } => Failure::Io(e.to_string()),
            StoreError::Corrupt { .. } => Failure::Protocol(e.to_string()),
            StoreError::UnknownPatient(_) | StoreError::InvalidQuery(_) => Failure::Usage(e.to_string()),
        }
    }
}

pub fn read_file(path: &std::path::Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn init_logging(default: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_env("VITALGATE_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
}

fn single_threaded() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .expect("tokio runtime")
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gateway(GatewayCommand::Run(a)) => {
            init_logging("info");
            let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Io(e.to_string()))?;
            rt.block_on(gateway::run(a))
        }
        Command::Sim(SimCommand::Run(a)) => {
            init_logging("warn");
            single_threaded().block_on(sim::run(a))
        }
        Command::Frames(FramesCommand::Inspect(a)) => frames::run(a),
        Command::Store(StoreCommand::Query(a)) => store::run(a),
        Command::Replay(a) => {
            init_logging("warn");
            single_threaded().block_on(replay::run(a))
        }
        Command::Modem(ModemCommand::Mock(a)) => {
            init_logging("info");
            single_threaded().block_on(modem::run(a))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("vitalgate: {f}");
            ExitCode::from(f.code())
        }
    }
}
