#![no_main]

use libfuzzer_sys::fuzz_target;
use magvlt::eval::{parse_audit, EvalReport};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_audit(text) {
        let _ = EvalReport::from_audit("fuzz", 0, &records);
    }
});
