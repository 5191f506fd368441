#![no_main]

use libfuzzer_sys::fuzz_target;
use vitalgate::store::{format_reading_line, parse_reading_line};

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(r) = parse_reading_line(line) {
        assert_eq!(parse_reading_line(&format_reading_line(&r)), Ok(r));
    }
});
