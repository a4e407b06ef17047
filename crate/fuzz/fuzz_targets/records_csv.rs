#![no_main]

use libfuzzer_sys::fuzz_target;
use metaunlearn::io::read_records_csv;
use metaunlearn::meta::MetaStepRecord;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = read_records_csv::<MetaStepRecord>(text);
    }
});
