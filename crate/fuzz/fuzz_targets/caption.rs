#![no_main]

use libfuzzer_sys::fuzz_target;
use magvlt::synth::CaptionSpec;
use magvlt::vocab::TextCodec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = CaptionSpec::parse(text);
    let codec = TextCodec::new(12);
    if let Ok((ids, _)) = codec.encode(text) {
        let back = codec.decode(&ids).expect("encoded caption decodes");
        assert_eq!(codec.encode(&back).unwrap().0, ids);
    }
    // raw ids, one byte each
    let ids: Vec<usize> = data.iter().take(12).map(|&b| b as usize % 40).collect();
    let _ = codec.decode(&ids);
});
