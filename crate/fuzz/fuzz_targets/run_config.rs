#![no_main]

use libfuzzer_sys::fuzz_target;
use mtdnn::config::{parse_kv, RunConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_kv(text);
    if let Ok(config) = RunConfig::from_text(text) {
        let text = config.to_text();
        assert_eq!(RunConfig::from_text(&text).expect("canonical text parses").to_text(), text);
    }
});
