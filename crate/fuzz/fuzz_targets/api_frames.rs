#![no_main]

use libfuzzer_sys::fuzz_target;
use vitalgate::wire::{ApiFrame, ReceivePacket, TransmitRequest};

fuzz_target!(|data: &[u8]| {
    let Some((&frame_type, body)) = data.split_first() else { return };
    let frame = ApiFrame::new(frame_type, body.to_vec());
    if let Ok(rx) = ReceivePacket::from_frame(&frame) {
        assert_eq!(rx.to_frame(), frame);
    }
    if let Ok(tx) = TransmitRequest::from_frame(&frame) {
        assert_eq!(tx.to_frame(), frame);
    }
});
