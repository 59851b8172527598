#![no_main]

use libfuzzer_sys::fuzz_target;
use magvlt::model::{decode_optimizer, encode_optimizer};

fuzz_target!(|data: &[u8]| {
    if let Ok(opt) = decode_optimizer(data) {
        let bytes = encode_optimizer(&opt);
        assert_eq!(decode_optimizer(&bytes).unwrap().step, opt.step);
    }
});
