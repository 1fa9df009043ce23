#![no_main]

use evaflow::network::KeyValues;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(kv) = KeyValues::parse(text) {
        let _ = evaflow::network::ModelConfig::from_kv(&kv);
        let _ = evaflow::network::TrainConfig::from_kv(&kv);
    }
});
