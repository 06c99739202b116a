//! Sample-file decoding. The first byte picks the channel count so that both
//! the length check and the row layout get exercised.

#![no_main]
use libfuzzer_sys::fuzz_target;
use sonar_tkbd::sim::{decode_samples, encode_samples};

fuzz_target!(|data: &[u8]| {
    let Some((&m, body)) = data.split_first() else {
        return;
    };
    if let Ok(samples) = decode_samples(body, m as usize) {
        assert_eq!(samples.ncols(), m as usize);
        // f32 values widen to f64 exactly, so re-encoding is lossless.
        assert_eq!(encode_samples(&samples), body);
    }
});
