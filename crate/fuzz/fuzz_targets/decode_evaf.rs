#![no_main]

use evaflow::flow::{decode_evaf, encode_evaf};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(flow) = decode_evaf(data) {
        let again = decode_evaf(&encode_evaf(&flow)).expect("re-encoded flow decodes");
        assert_eq!(again.valid, flow.valid);
    }
});
