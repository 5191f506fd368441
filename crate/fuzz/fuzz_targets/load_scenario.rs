#![no_main]

use libfuzzer_sys::fuzz_target;
use vitalgate::simulator::load_scenario;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    match load_scenario(text) {
        Ok(s) => {
            if s.expected_emissions() <= 2_000 {
                assert_eq!(s.emissions().len() as u64, s.expected_emissions());
            }
        }
        Err(e) => {
            if let Some(line) = e.line {
                assert!(line >= 1 && line <= text.lines().count().max(1) + 1);
            }
        }
    }
});
