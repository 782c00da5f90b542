#![no_main]

use afford_core::backbone::PointCloud;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = PointCloud::parse(text) {
        assert_eq!(PointCloud::parse(&c.to_text()).expect("cloud re-parses").len(), c.len());
    }
});
