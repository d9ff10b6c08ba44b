#![no_main]

use libfuzzer_sys::fuzz_target;

use bayesseg::io::pnm::{decode_ppm, encode_ppm};

fuzz_target!(|data: &[u8]| {
    if let Ok(image) = decode_ppm(data) {
        let bytes = encode_ppm(&image).expect("decoded image re-encodes");
        assert_eq!(decode_ppm(&bytes).expect("roundtrip"), image);
    }
});
