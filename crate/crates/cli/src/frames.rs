use std::fmt::Write as _;
use std::io::{Read, Write};

use vitalgate::wire::{
    hex, ApiFrame, ApiMode, DecodeEvent, FrameDecoder, ReceivePacket, TelemetryPayload, TransmitRequest,
    FRAME_TYPE_RECEIVE_PACKET, FRAME_TYPE_TRANSMIT_REQUEST,
};

use crate::{Failure, FramesInspectArgs};

fn read_input(a: &FramesInspectArgs) -> Result<Vec<u8>, Failure> {
    if a.input.as_os_str() == "-" {
        let mut buf = Vec::new();
        std::io::stdin()
            .read_to_end(&mut buf)
            .map_err(|e| Failure::Io(format!("stdin: {e}")))?;
        Ok(buf)
    } else {
        std::fs::read(&a.input).map_err(|e| Failure::Io(format!("{}: {e}", a.input.display())))
    }
}

fn describe_payload(out: &mut String, rf_data: &[u8]) -> bool {
    match TelemetryPayload::decode(rf_data) {
        Ok(p) => {
            let _ = writeln!(
                out,
                "  payload: patient {} {} sequence {} raw {} value {} {}",
                p.patient_id,
                p.metric.as_str(),
                p.sequence,
                p.raw_value,
                p.value(),
                p.metric.unit().symbol()
            );
            true
        }
        Err(e) => {
            let _ = writeln!(out, "  payload error: {e} ({})", hex(rf_data));
            false
        }
    }
}

/// Appends the decoded fields of `frame`; returns false on a payload error.
pub fn describe_frame(out: &mut String, frame: &ApiFrame) -> bool {
    match frame.frame_type {
        FRAME_TYPE_RECEIVE_PACKET => match ReceivePacket::from_frame(frame) {
            Ok(p) => {
                let _ = writeln!(
                    out,
                    "  receive packet: source {:016X}/{:04X} options {:#04x}",
                    p.source_addr64, p.source_addr16, p.receive_options
                );
                describe_payload(out, &p.rf_data)
            }
            Err(e) => {
                let _ = writeln!(out, "  frame error: {e}");
                false
            }
        },
        FRAME_TYPE_TRANSMIT_REQUEST => match TransmitRequest::from_frame(frame) {
            Ok(t) => {
                let _ = writeln!(
                    out,
                    "  transmit request: id {} dest {:016X}/{:04X} radius {} options {:#04x}",
                    t.frame_id, t.dest_addr64, t.dest_addr16, t.broadcast_radius, t.options
                );
                describe_payload(out, &t.rf_data)
            }
            Err(e) => {
                let _ = writeln!(out, "  frame error: {e}");
                false
            }
        },
        other => {
            let _ = writeln!(out, "  unsupported frame type {other:#04x}: {}", hex(&frame.body));
            true
        }
    }
}

/// Renders the dump and returns it with the number of problems found.
pub fn inspect(input: &[u8], mode: ApiMode) -> (String, usize) {
    let mut out = String::new();
    let mut dec = FrameDecoder::new(mode);
    dec.feed(input);
    let mut frames = 0;
    let mut problems = 0;
    loop {
        let start = input.len() - dec.buffered();
        let Some(event) = dec.next_event() else { break };
        match event {
            DecodeEvent::Frame(f) => {
                frames += 1;
                let end = input.len() - dec.buffered();
                let _ = writeln!(
                    out,
                    "frame {frames} at offset {start}: type {:#04x}, length {}, checksum {:#04x}",
                    f.frame_type,
                    f.data_len(),
                    f.checksum()
                );
                let _ = writeln!(out, "  bytes: {}", hex(&input[start..end]));
                if !describe_frame(&mut out, &f) {
                    problems += 1;
                }
            }
            DecodeEvent::Error(e) => {
                problems += 1;
                let _ = writeln!(out, "error: {e}");
            }
        }
    }
    if let Some(e) = dec.flush_noise() {
        problems += 1;
        let _ = writeln!(out, "error: {e}");
    }
    if dec.buffered() > 0 {
        problems += 1;
        let _ = writeln!(
            out,
            "error: incomplete frame of {} bytes at offset {}",
            dec.buffered(),
            input.len() - dec.buffered()
        );
    }
    let _ = writeln!(out, "{frames} frames, {problems} errors");
    (out, problems)
}

pub fn run(a: FramesInspectArgs) -> Result<(), Failure> {
    let input = read_input(&a)?;
    let (text, problems) = inspect(&input, ApiMode::from_escaped(a.escaped));
    std::io::stdout()
        .write_all(text.as_bytes())
        .map_err(|e| Failure::Io(format!("stdout: {e}")))?;
    if problems > 0 {
        return Err(Failure::Protocol(format!("{problems} decode errors")));
    }
    Ok(())
}
