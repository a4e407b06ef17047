#![no_main]

use libfuzzer_sys::fuzz_target;
use metaunlearn::attack::RelearnCurve;

// input: curve CSV, a NUL byte, then trace CSV
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (curve, trace) = text.split_once('\0').unwrap_or((text, ""));
    if let Ok(mut c) = RelearnCurve::parse_csv(curve) {
        let _ = c.parse_trace(trace);
    }
});
