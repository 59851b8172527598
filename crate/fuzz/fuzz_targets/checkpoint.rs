#![no_main]

use libfuzzer_sys::fuzz_target;
use magvlt::model::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok((params, header)) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&params, &header.run_config, &header.config_hash, header.step);
        let (again, _) = decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.config, params.config);
    }
});
