#![no_main]

use libfuzzer_sys::fuzz_target;

use bayesseg::io::checkpoint::{decode, encode};

// The encoding is canonical, so anything accepted must re-encode to the same bytes.
fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode(data) {
        assert_eq!(encode(&model), data);
    }
});
