//! Arbitrary bytes must never panic the model decoder, and anything it
//! accepts must survive an encode/decode round trip unchanged.

#![no_main]
use libfuzzer_sys::fuzz_target;
use sonar_tkbd::noise::VarModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = VarModel::from_bytes(data) {
        let again = VarModel::from_bytes(&model.to_bytes()).expect("re-encoded model must decode");
        assert_eq!(model.to_bytes(), again.to_bytes());
    }
});
