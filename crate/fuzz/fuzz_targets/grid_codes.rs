#![no_main]

use libfuzzer_sys::fuzz_target;
use magvlt::vocab::GridImage;

fuzz_target!(|data: &[u8]| {
    let Some((&size, rest)) = data.split_first() else { return };
    let ids: Vec<usize> = rest.iter().map(|&b| b as usize).collect();
    if let Ok(img) = GridImage::decode(size as usize % 17, &ids) {
        assert_eq!(img.encode(), ids);
        let _ = img.to_art();
    }
});
