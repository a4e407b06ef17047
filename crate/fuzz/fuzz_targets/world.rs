#![no_main]

use libfuzzer_sys::fuzz_target;
use metaunlearn::concepts::ConceptTable;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok((table, bundle)) = ConceptTable::parse(text) {
            // a parsed world must serialize back to something parseable
            let again = ConceptTable::parse(&table.to_json(bundle.as_ref())).expect("round trip");
            assert_eq!(again.0, table);
        }
    }
});
