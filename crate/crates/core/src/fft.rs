//! Thread-local FFT plan cache.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

struct Plans {
    planner: FftPlanner<f64>,
    forward: HashMap<usize, Arc<dyn Fft<f64>>>,
    inverse: HashMap<usize, Arc<dyn Fft<f64>>>,
}

thread_local! {
    static PLANS: RefCell<Plans> = RefCell::new(Plans {
        planner: FftPlanner::new(),
        forward: HashMap::new(),
        inverse: HashMap::new(),
    });
}

/// Unnormalized forward DFT, in place.
pub(crate) fn forward(buf: &mut [Complex64]) {
    let fft = PLANS.with(|p| {
        let mut p = p.borrow_mut();
        let Plans {
            planner, forward, ..
        } = &mut *p;
        forward
            .entry(buf.len())
            .or_insert_with(|| planner.plan_fft_forward(buf.len()))
            .clone()
    });
    fft.process(buf);
}

/// Inverse DFT scaled by `1/N`, in place.
pub(crate) fn inverse(buf: &mut [Complex64]) {
    let fft = PLANS.with(|p| {
        let mut p = p.borrow_mut();
        let Plans {
            planner, inverse, ..
        } = &mut *p;
        inverse
            .entry(buf.len())
            .or_insert_with(|| planner.plan_fft_inverse(buf.len()))
            .clone()
    });
    fft.process(buf);
    let scale = 1.0 / buf.len() as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

pub(crate) fn forward_real(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    forward(&mut buf);
    buf
}
