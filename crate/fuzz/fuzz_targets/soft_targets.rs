#![no_main]

use libfuzzer_sys::fuzz_target;
use mtdnn::distill::SoftTargetStore;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(store) = SoftTargetStore::parse(text) {
        let again = SoftTargetStore::parse(&store.to_text()).expect("written store parses");
        assert_eq!(again.to_text(), store.to_text());
    }
});
