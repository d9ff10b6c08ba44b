#![no_main]

use libfuzzer_sys::fuzz_target;

use bayesseg::io::pnm::{decode_pgm, encode_pgm};

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = decode_pgm(data) {
        assert_eq!(decode_pgm(&encode_pgm(&map)).expect("roundtrip"), map);
    }
});
