use std::io::Write;

use vitalgate::model::iso_ms;
use vitalgate::store::{SeriesQuery, Store};

use crate::export::CsvWriter;
use crate::{Failure, StoreQueryArgs};

fn parse_ts(field: &str, s: &str) -> Result<chrono::DateTime<chrono::Utc>, Failure> {
    iso_ms::parse(s).map_err(|e| Failure::Usage(format!("--{field}: {e}")))
}

pub fn run(a: StoreQueryArgs) -> Result<(), Failure> {
    let from = parse_ts("from", &a.from)?;
    let to = parse_ts("to", &a.to)?;
    let q = SeriesQuery {
        patient_id: a.patient,
        metric: a.metric,
        from,
        to,
        max_points: None,
    };
    q.validate()?;
    let store = Store::open_read_only(&a.store)?;
    let rows: Vec<_> = store
        .readings()
        .iter()
        .filter(|r| r.patient_id == q.patient_id && r.metric == q.metric && r.timestamp >= from && r.timestamp < to)
        .collect();
    let stdout = std::io::stdout().lock();
    if a.csv {
        if rows.is_empty() {
            return Ok(());
        }
        let mut w = CsvWriter::new(stdout);
        for r in &rows {
            w.write(r)?;
        }
        w.flush()
    } else {
        let mut out = std::io::BufWriter::new(stdout);
        for r in rows {
            writeln!(out, "{}\t{}", iso_ms::format(&r.timestamp), r.value)
                .map_err(|e| Failure::Io(format!("stdout: {e}")))?;
        }
        out.flush().map_err(|e| Failure::Io(format!("stdout: {e}")))
    }
}
