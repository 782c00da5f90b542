#![no_main]

use afford_core::text::InstructionRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rec) = InstructionRecord::parse_line(text) {
        if let Ok(line) = rec.to_line() {
            assert_eq!(InstructionRecord::parse_line(&line).expect("line re-parses"), rec);
        }
    }
});
