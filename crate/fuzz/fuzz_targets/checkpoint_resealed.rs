#![no_main]

//! Appends a valid checksum so mutations reach the header and body decoder.

use libfuzzer_sys::fuzz_target;
use mtdnn::data::Checkpoint;
use sha2::{Digest, Sha256};

fuzz_target!(|body: &[u8]| {
    let mut bytes = body.to_vec();
    bytes.extend_from_slice(&Sha256::digest(body));
    if let Ok(ck) = Checkpoint::from_bytes(&bytes) {
        let again = Checkpoint::from_bytes(&ck.to_bytes().expect("decoded checkpoint encodes")).expect("re-decodes");
        assert_eq!(again.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }
});
