#![no_main]

use libfuzzer_sys::fuzz_target;
use metaunlearn::io::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ckpt) = Checkpoint::parse(text) {
            let _ = ckpt.params();
        }
    }
});
