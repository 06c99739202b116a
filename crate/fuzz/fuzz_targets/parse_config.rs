//! Pipeline config parsing over both profiles. Accepted configs must
//! re-serialize to text that parses back to the same value.

#![no_main]
use libfuzzer_sys::fuzz_target;
use sonar_tkbd::config::{PipelineConfig, Profile};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    for profile in [Profile::Real, Profile::Sim] {
        if let Ok(cfg) = PipelineConfig::from_toml_str(text, profile) {
            let echoed = cfg.to_toml_string().expect("valid config must serialize");
            let again = PipelineConfig::from_toml_str(&echoed, profile).expect("echoed config must parse");
            assert_eq!(cfg, again);
        }
    }
});
