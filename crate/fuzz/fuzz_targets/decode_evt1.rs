#![no_main]

use evaflow::events::{decode_evt1, encode_evt1};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must re-encode to the same bytes.
    if let Ok(window) = decode_evt1(data) {
        let bytes = encode_evt1(&window).expect("decoded window re-encodes");
        assert_eq!(bytes, data);
    }
});
