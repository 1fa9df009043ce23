#![no_main]

use evaflow::network::ModelParams;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = ModelParams::decode(data) {
        let again = ModelParams::decode(&params.encode()).expect("re-encoded params decode");
        assert_eq!(again, params);
    }
});
