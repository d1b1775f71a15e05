#![no_main]

use libfuzzer_sys::fuzz_target;
use mtdnn::data::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        let bytes = ck.to_bytes().expect("decoded checkpoint encodes");
        let again = Checkpoint::from_bytes(&bytes).expect("encoded checkpoint decodes");
        assert_eq!(again.to_bytes().unwrap(), bytes);
    }
});
