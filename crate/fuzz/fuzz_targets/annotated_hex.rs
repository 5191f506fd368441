#![no_main]

use libfuzzer_sys::fuzz_target;
use vitalgate::sms::{parse_annotated_hex, AtTranscript};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(dialogue) = parse_annotated_hex(text) {
        let mut t = AtTranscript::default();
        for (dir, bytes) in &dialogue {
            t.push(1, *dir, bytes, 0);
        }
        assert_eq!(parse_annotated_hex(&t.to_annotated_hex()).unwrap(), t.dialogue());
    }
});
