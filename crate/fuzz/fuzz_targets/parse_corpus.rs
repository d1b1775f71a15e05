#![no_main]

use libfuzzer_sys::fuzz_target;
use mtdnn::data::{format_corpus, parse_corpus};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(parsed) = parse_corpus(text) {
        let again = parse_corpus(&format_corpus(&parsed).expect("parsed corpus formats")).expect("formatted corpus parses");
        assert_eq!(parsed, again);
    }
});
