#![no_main]

use libfuzzer_sys::fuzz_target;
use metaunlearn::pipeline::RunManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = RunManifest::parse(text) {
            let _ = m.fingerprint();
            let _ = m.verify(std::path::Path::new("/nonexistent"));
        }
    }
});
