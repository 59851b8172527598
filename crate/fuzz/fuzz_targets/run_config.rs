#![no_main]

use libfuzzer_sys::fuzz_target;
use magvlt::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rc) = RunConfig::parse(text) {
        let again = RunConfig::parse(&rc.to_text()).expect("canonical text parses");
        assert_eq!(again, rc);
        assert_eq!(again.hash(), rc.hash());
    }
});
