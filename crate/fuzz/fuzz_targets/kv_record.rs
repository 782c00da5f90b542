#![no_main]

use afford_core::io::KvRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(recs) = KvRecord::parse_all(text) {
        for r in recs {
            if let Ok(line) = r.to_line() {
                let _ = KvRecord::parse_line(&line, 1).expect("line re-parses");
            }
        }
    }
});
