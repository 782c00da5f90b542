#![no_main]

use afford_core::decoder::{mask_to_text, parse_mask};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_mask(text) {
        assert_eq!(parse_mask(&mask_to_text(&m)).expect("mask re-parses").len(), m.len());
    }
});
