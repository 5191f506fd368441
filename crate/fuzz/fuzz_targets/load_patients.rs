#![no_main]

use libfuzzer_sys::fuzz_target;
use vitalgate::config::load_patients;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(patients) = load_patients(text) {
        for p in &patients {
            assert!(p.validate().is_ok());
        }
    }
});
