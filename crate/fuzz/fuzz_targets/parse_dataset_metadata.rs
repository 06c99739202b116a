#![no_main]
use libfuzzer_sys::fuzz_target;
use sonar_tkbd::sim::DatasetMetadata;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(meta) = DatasetMetadata::from_toml_str(text) {
            let echoed = meta.to_toml_string().expect("valid metadata must serialize");
            assert_eq!(DatasetMetadata::from_toml_str(&echoed).ok(), Some(meta));
        }
    }
});
