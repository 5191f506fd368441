use std::path::Path;

use tokio::net::TcpStream;
use vitalgate::simulator::{load_scenario, run_scenario, SimulationReport};

use crate::{read_file, Failure, SimRunArgs};

fn write_report(path: &Path, report: &SimulationReport) -> Result<(), Failure> {
    let json = serde_json::to_vec_pretty(report).map_err(|e| Failure::Io(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

pub async fn run(a: SimRunArgs) -> Result<(), Failure> {
    let text = read_file(&a.scenario)?;
    let mut scenario = load_scenario(&text)?;
    if let Some(seed) = a.seed {
        scenario.rng_seed = seed;
    }
    for d in &scenario.defaults_applied {
        eprintln!("default: {d}");
    }
    let mut conn = TcpStream::connect(&a.connect)
        .await
        .map_err(|e| Failure::Io(format!("connect {}: {e}", a.connect)))?;
    conn.set_nodelay(true).map_err(|e| Failure::Io(e.to_string()))?;
    match run_scenario(&scenario, &mut conn).await {
        Ok(report) => {
            eprintln!(
                "sent {} frames ({} bytes) in {} ms",
                report.frames, report.bytes, report.wall_elapsed_ms
            );
            if let Some(path) = &a.report {
                write_report(path, &report)?;
            }
            Ok(())
        }
        Err(aborted) => {
            if let Some(path) = &a.report {
                write_report(path, &aborted.report)?;
            }
            Err(Failure::Io(aborted.to_string()))
        }
    }
}
