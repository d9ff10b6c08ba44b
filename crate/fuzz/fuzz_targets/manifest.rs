#![no_main]

use libfuzzer_sys::fuzz_target;

use bayesseg::io::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(m) = DatasetManifest::parse(&text, "manifest.txt", "root") {
        let again = DatasetManifest::parse(&m.render(), "manifest.txt", "root").expect("rendered manifest parses");
        assert_eq!(again, m);
    }
});
