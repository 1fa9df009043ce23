#![no_main]

use evaflow::events::{decode_text, write_text};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(window) = decode_text(data) {
        let mut out = Vec::new();
        write_text(&mut out, &window).unwrap();
        let again = decode_text(&out).expect("written text parses");
        assert_eq!(again.len(), window.len());
    }
});
