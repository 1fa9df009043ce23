#![no_main]

use evaflow::representation::{decode_evgr, encode_evgr};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(grid) = decode_evgr(data) {
        let again = decode_evgr(&encode_evgr(&grid)).expect("re-encoded grid decodes");
        assert_eq!(again.data.len(), grid.data.len());
    }
});
