#![no_main]

use libfuzzer_sys::fuzz_target;
use vitalgate::wire::{decode_stream, encode_frame, ApiMode, DecodeEvent, FrameDecoder};

fn events(chunks: &[&[u8]], mode: ApiMode) -> Vec<DecodeEvent> {
    let mut d = FrameDecoder::new(mode);
    let mut out = Vec::new();
    for c in chunks {
        d.feed(c);
        while let Some(e) = d.next_event() {
            out.push(e);
        }
    }
    out.extend(d.flush_noise().map(DecodeEvent::Error));
    out
}

// First byte picks the mode and a split point; the rest is the stream.
fuzz_target!(|data: &[u8]| {
    let Some((&ctl, stream)) = data.split_first() else { return };
    let mode = ApiMode::from_escaped(ctl & 1 == 1);
    let out = decode_stream(stream, mode);
    assert!(out.consumed <= stream.len());

    let split = if stream.is_empty() { 0 } else { usize::from(ctl >> 1) % (stream.len() + 1) };
    let (a, b) = stream.split_at(split);
    assert_eq!(events(&[a, b], mode), events(&[stream], mode));

    for f in &out.frames {
        let bytes = encode_frame(f, mode).expect("decoded frame re-encodes");
        assert_eq!(decode_stream(&bytes, mode).frames, vec![f.clone()]);
    }
});
