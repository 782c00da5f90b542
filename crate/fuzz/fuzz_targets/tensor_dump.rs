#![no_main]

use afford_core::tensor::Tensor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = Tensor::parse_dump(text) {
        let again = Tensor::parse_dump(&t.to_dump()).expect("dump re-parses");
        assert_eq!(again.shape(), t.shape());
    }
});
