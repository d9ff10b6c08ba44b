//! Config files are text; invalid UTF-8 is converted lossily.

#![no_main]

use libfuzzer_sys::fuzz_target;

use bayesseg::io::RunConfig;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(cfg) = RunConfig::parse(&text, "fuzz.cfg") {
        cfg.model.validate().expect("parsed model config is valid");
        cfg.train.validate().expect("parsed train config is valid");
    }
});
