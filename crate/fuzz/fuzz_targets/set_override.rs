#![no_main]

use libfuzzer_sys::fuzz_target;
use metaunlearn::config::apply_override;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let mut doc = toml::Table::new();
        let _ = apply_override(&mut doc, text);
    }
});
