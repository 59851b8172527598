#![no_main]

use libfuzzer_sys::fuzz_target;
use magvlt::vocab::VocabFile;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = VocabFile::from_json(text) {
        assert_eq!(VocabFile::from_json(&v.to_json()).unwrap(), v);
    }
});
