#![no_main]

use libfuzzer_sys::fuzz_target;
use vitalgate::wire::TelemetryPayload;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = TelemetryPayload::decode(data) {
        assert_eq!(&p.encode()[..], data);
        assert!(p.value().is_finite());
    }
});
