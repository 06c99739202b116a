#![no_main]
use libfuzzer_sys::fuzz_target;
use sonar_tkbd::eval::TrackLog;

fuzz_target!(|data: &[u8]| {
    if let Ok(log) = TrackLog::read_csv(data) {
        let mut out = Vec::new();
        log.write_csv(&mut out).expect("in-memory write");
        let again = TrackLog::read_csv(out.as_slice()).expect("written log must parse");
        assert_eq!(log.rows.len(), again.rows.len());
    }
});
