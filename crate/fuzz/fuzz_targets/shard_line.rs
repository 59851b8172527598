#![no_main]

use libfuzzer_sys::fuzz_target;
use magvlt::synth::{parse_shard, Sample};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for size in [4, 8] {
        if let Ok(s) = Sample::from_line(text, size) {
            assert_eq!(Sample::from_line(&s.to_line(), size).unwrap(), s);
        }
        let _ = parse_shard(text, size);
    }
});
