#![no_main]
use libfuzzer_sys::fuzz_target;
use sonar_tkbd::sim::ScenarioTruth;

fuzz_target!(|data: &[u8]| {
    if let Ok(truth) = ScenarioTruth::read_csv(data) {
        let mut out = Vec::new();
        truth.write_csv(&mut out).expect("in-memory write");
        let again = ScenarioTruth::read_csv(out.as_slice()).expect("written truth must parse");
        assert_eq!(truth.rows.len(), again.rows.len());
    }
});
