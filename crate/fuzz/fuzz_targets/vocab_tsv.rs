#![no_main]

use afford_core::text::Vocabulary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = Vocabulary::from_tsv(text) {
        assert_eq!(Vocabulary::from_tsv(&v.to_tsv()).expect("tsv re-parses"), v);
    }
});
