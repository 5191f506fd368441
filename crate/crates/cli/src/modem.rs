use std::sync::Arc;

use tokio::net::TcpListener;
use vitalgate::clock::{ScaledClock, SharedClock};
use vitalgate::sms::{Behavior, MockModem, ModemScript};
use vitalgate::sms::Stage;

use crate::{Failure, ModemMockArgs};

fn parse_stage(s: &str) -> Result<Stage, Failure> {
    match s {
        "at" => Ok(Stage::Attention),
        "cmgf" => Ok(Stage::TextMode),
        "recipient" => Ok(Stage::Recipient),
        "body" => Ok(Stage::Body),
        other => Err(Failure::Usage(format!(
            "--error-at: unknown stage `{other}` (at, cmgf, recipient, body)"
        ))),
    }
}

pub async fn run(a: ModemMockArgs) -> Result<(), Failure> {
    let mut script = ModemScript::all_ok();
    if let Some(stage) = &a.error_at {
        script = script.repeat(parse_stage(stage)?, Behavior::ERROR, a.error_count);
    }
    let listener = TcpListener::bind(a.listen)
        .await
        .map_err(|e| Failure::Io(format!("bind {}: {e}", a.listen)))?;
    let local = listener.local_addr().map_err(|e| Failure::Io(e.to_string()))?;
    eprintln!("modem listening on {local}");
    let clock: SharedClock = Arc::new(ScaledClock::real_time());
    let modem = MockModem::new(script, clock);
    let mut printed = 0;
    loop {
        let (sock, peer) = listener.accept().await.map_err(|e| Failure::Io(format!("accept: {e}")))?;
        if let Err(e) = modem.serve(sock).await {
            tracing::debug!(%peer, error = %e, "session ended");
        }
        let sent = modem.sent();
        for m in &sent[printed..] {
            println!("{}\t{}\t{}", m.reference, m.phone, m.body);
        }
        printed = sent.len();
    }
}
