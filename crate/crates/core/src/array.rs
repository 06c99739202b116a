//! Array geometry, fractional-delay steering and delay-and-sum beamforming.
//!
//! Bearings are in degrees, measured from array broadside (+y) towards +x.
//! Channel `m` of a batch carries the source signal delayed by
//! `tau_m(psi) = (p_m - p_0) . u(psi) / c` with `u(psi) = (sin psi, cos psi)`.
//!
//! The fractional-delay filter for channel `m` is `W* diag(gamma(tau_m)) W`
//! with `W` the unitary DFT. It is never materialized; it is applied per
//! channel in the frequency domain.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::fft;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayGeometry {
    positions: Vec<[f64; 2]>,
    speed_of_sound: f64,
    sample_rate: f64,
}

impl ArrayGeometry {
    pub fn new(positions: Vec<[f64; 2]>, speed_of_sound: f64, sample_rate: f64) -> Result<Self> {
        let geom = Self {
            positions,
            speed_of_sound,
            sample_rate,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Uniform linear array along the x axis, centered on the origin.
    pub fn uniform_linear(
        elements: usize,
        spacing: f64,
        speed_of_sound: f64,
        sample_rate: f64,
    ) -> Result<Self> {
        let mid = (elements as f64 - 1.0) / 2.0;
        let positions = (0..elements)
            .map(|m| [(m as f64 - mid) * spacing, 0.0])
            .collect();
        Self::new(positions, speed_of_sound, sample_rate)
    }

    /// Checks the invariants; also needed after deserializing.
    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::InvalidGeometry("array has no elements".into()));
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "sample rate {} must be positive",
                self.sample_rate
            )));
        }
        if !(self.speed_of_sound.is_finite() && self.speed_of_sound > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "speed of sound {} must be positive",
                self.speed_of_sound
            )));
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite element position".into()));
        }
        Ok(())
    }

    pub fn elements(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn speed_of_sound(&self) -> f64 {
        self.speed_of_sound
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    /// Element step `v` when `p_m = p_0 + m v` for every element.
    pub fn uniform_step(&self) -> Option<[f64; 2]> {
        let p0 = self.positions[0];
        let v = match self.positions.get(1) {
            Some(p1) => [p1[0] - p0[0], p1[1] - p0[1]],
            None => return Some([0.0, 0.0]),
        };
        let tol = 1e-9 * (1.0 + v[0].abs() + v[1].abs());
        self.positions.iter().enumerate().all(|(m, p)| {
            (p[0] - p0[0] - m as f64 * v[0]).abs() <= tol && (p[1] - p0[1] - m as f64 * v[1]).abs() <= tol
        })
        .then_some(v)
    }

    /// Largest distance between any two elements.
    pub fn aperture(&self) -> f64 {
        let mut best = 0.0f64;
        for a in &self.positions {
            for b in &self.positions {
                best = best.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
            }
        }
        best
    }

    /// Plane-wave delays in seconds, referenced to element 0.
    pub fn steering_delays(&self, bearing_deg: f64) -> Vec<f64> {
        let (s, c) = bearing_deg.to_radians().sin_cos();
        let p0 = self.positions[0];
        self.positions
            .iter()
            .map(|p| ((p[0] - p0[0]) * s + (p[1] - p0[1]) * c) / self.speed_of_sound)
            .collect()
    }
}

/// One batch of `N` samples from `M` hydrophones; column `m` is channel `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    data: DMatrix<f64>,
    index: usize,
}

impl SampleBatch {
    pub fn new(data: DMatrix<f64>, index: usize) -> Result<Self> {
        if data.nrows() % 2 != 0 || data.nrows() == 0 {
            return Err(Error::UnsupportedBatchLength(data.nrows()));
        }
        if data.ncols() == 0 {
            return Err(Error::DimensionMismatch("batch has no channels".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("batch contains non-finite samples".into()));
        }
        Ok(Self { data, index })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    /// `||y||^2` over all samples and channels.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Frequency response of the fractional delay `tau * f_s` samples at bin `n`
/// of an `len`-point DFT. The Nyquist bin is real so that real inputs stay real.
pub fn fractional_delay_gain(bin: usize, len: usize, delay_samples: f64) -> Complex64 {
    let half = len / 2;
    if len % 2 == 0 && bin == half {
        Complex64::new((delay_samples * PI).cos(), 0.0)
    } else if bin < half || (len % 2 == 1 && bin == half) {
        Complex64::from_polar(1.0, -2.0 * PI * bin as f64 * delay_samples / len as f64)
    } else {
        Complex64::from_polar(1.0, 2.0 * PI * (len - bin) as f64 * delay_samples / len as f64)
    }
}

/// Per-channel diagonal spectra of the steering matrix `H(psi)`.
#[derive(Debug, Clone)]
pub struct SteeringOperator {
    bearing_deg: f64,
    len: usize,
    spectra: Vec<Vec<Complex64>>,
}

impl SteeringOperator {
    pub fn new(geom: &ArrayGeometry, bearing_deg: f64, len: usize) -> Result<Self> {
        let delays = geom.steering_delays(bearing_deg);
        Self::from_delays(&delays, geom.sample_rate(), len).map(|mut op| {
            op.bearing_deg = bearing_deg;
            op
        })
    }

    /// Operator for explicit per-channel delays in seconds.
    pub fn from_delays(delays: &[f64], sample_rate: f64, len: usize) -> Result<Self> {
        if len == 0 || len % 2 != 0 {
            return Err(Error::UnsupportedBatchLength(len));
        }
        let spectra = delays
            .iter()
            .map(|&tau| {
                let d = tau * sample_rate;
                (0..len).map(|n| fractional_delay_gain(n, len, d)).collect()
            })
            .collect();
        Ok(Self {
            bearing_deg: f64::NAN,
            len,
            spectra,
        })
    }

    pub fn bearing_deg(&self) -> f64 {
        self.bearing_deg
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.spectra.len()
    }

    pub fn spectrum(&self, channel: usize) -> &[Complex64] {
        &self.spectra[channel]
    }

    fn filter(&self, channel: usize, x: &[f64], conjugate: bool) -> Vec<Complex64> {
        let mut buf = fft::forward_real(x);
        for (v, g) in buf.iter_mut().zip(&self.spectra[channel]) {
            *v *= if conjugate { g.conj() } else { *g };
        }
        fft::inverse(&mut buf);
        buf
    }

    /// `H_m x`: delays `x` by the channel's steering delay.
    pub fn apply_channel(&self, channel: usize, x: &[f64]) -> Vec<f64> {
        self.filter(channel, x, false).iter().map(|c| c.re).collect()
    }

    /// `H_m^T x`: reverses the channel's steering delay.
    pub fn apply_channel_transpose(&self, channel: usize, x: &[f64]) -> Vec<f64> {
        self.filter(channel, x, true).iter().map(|c| c.re).collect()
    }

    /// `H s` as an `N x M` batch matrix.
    pub fn apply(&self, source: &[f64]) -> Result<DMatrix<f64>> {
        if source.len() != self.len {
            return Err(Error::DimensionMismatch(format!(
                "source has {} samples, operator expects {}",
                source.len(),
                self.len
            )));
        }
        let mut out = DMatrix::zeros(self.len, self.channels());
        for m in 0..self.channels() {
            out.set_column(m, &nalgebra::DVector::from_vec(self.apply_channel(m, source)));
        }
        Ok(out)
    }

    /// `H^T y`: the delay-compensated channel sum.
    pub fn apply_transpose(&self, batch: &SampleBatch) -> Result<Vec<f64>> {
        if batch.samples() != self.len || batch.channels() != self.channels() {
            return Err(Error::DimensionMismatch(format!(
                "batch is {}x{}, operator is {}x{}",
                batch.samples(),
                batch.channels(),
                self.len,
                self.channels()
            )));
        }
        let mut acc = vec![0.0; self.len];
        for m in 0..self.channels() {
            let col: Vec<f64> = batch.data().column(m).iter().copied().collect();
            for (a, v) in acc.iter_mut().zip(self.apply_channel_transpose(m, &col)) {
                *a += v;
            }
        }
        Ok(acc)
    }
}

/// `B(psi, y) = ||H^T(psi) y||^2`.
pub fn beamform(op: &SteeringOperator, batch: &SampleBatch) -> Result<f64> {
    Ok(op.apply_transpose(batch)?.iter().map(|v| v * v).sum())
}

/// Non-negative half spectrum of every channel of one batch.
///
/// Caching the channel FFTs reduces each beamformer evaluation to
/// `O(N M)` multiply-adds, which is what the particle filter needs when it
/// evaluates `B` at every particle bearing.
#[derive(Debug, Clone)]
pub struct BatchSpectrum {
    len: usize,
    channels: usize,
    /// `channels x (len/2 + 1)`, channel-major.
    bins: Vec<Complex64>,
    energy: f64,
}

impl BatchSpectrum {
    pub fn new(batch: &SampleBatch) -> Self {
        let len = batch.samples();
        let half = len / 2 + 1;
        let mut bins = Vec::with_capacity(half * batch.channels());
        for col in batch.data().column_iter() {
            let x: Vec<f64> = col.iter().copied().collect();
            bins.extend_from_slice(&fft::forward_real(&x)[..half]);
        }
        Self {
            len,
            channels: batch.channels(),
            bins,
            energy: batch.energy(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `||y||^2` of the batch the spectrum was taken from.
    pub fn energy(&self) -> f64 {
        self.energy
    }

    /// `B(psi, y)` for explicit per-channel delays in samples.
    pub fn beam_energy_for_delays(&self, delays_samples: &[f64]) -> f64 {
        let half = self.len / 2;
        let mut acc = vec![Complex64::new(0.0, 0.0); half + 1];
        for (m, &d) in delays_samples.iter().enumerate().take(self.channels) {
            let bins = &self.bins[m * (half + 1)..(m + 1) * (half + 1)];
            // conj(gamma^n) = step^n below Nyquist
            let step = Complex64::from_polar(1.0, 2.0 * PI * d / self.len as f64);
            let mut phase = Complex64::new(1.0, 0.0);
            for (a, b) in acc.iter_mut().zip(bins).take(half) {
                *a += phase * b;
                phase *= step;
            }
            acc[half] += bins[half] * (d * PI).cos();
        }
        let interior: f64 = acc[1..half].iter().map(|c| c.norm_sqr()).sum();
        (acc[0].norm_sqr() + acc[half].norm_sqr() + 2.0 * interior) / self.len as f64
    }

    /// `B` for delays `m * step` samples on channel `m`; evaluates the channel
    /// sum of every bin as a polynomial in the per-bin phase (Horner).
    pub fn beam_energy_uniform(&self, step: f64) -> f64 {
        let half = self.len / 2;
        let stride = half + 1;
        let m = self.channels;
        let rot = Complex64::from_polar(1.0, 2.0 * PI * step / self.len as f64);
        let mut w = Complex64::new(1.0, 0.0);
        let mut interior = 0.0;
        let mut edge = 0.0;
        for n in 0..half {
            let mut z = self.bins[(m - 1) * stride + n];
            for c in (0..m - 1).rev() {
                z = z * w + self.bins[c * stride + n];
            }
            if n == 0 {
                edge = z.norm_sqr();
            } else {
                interior += z.norm_sqr();
            }
            w *= rot;
        }
        let mut nyq = Complex64::new(0.0, 0.0);
        for c in 0..m {
            nyq += self.bins[c * stride + half] * (c as f64 * step * PI).cos();
        }
        (edge + nyq.norm_sqr() + 2.0 * interior) / self.len as f64
    }

    pub fn beam_energy(&self, geom: &ArrayGeometry, bearing_deg: f64) -> f64 {
        let fs = geom.sample_rate();
        if let Some(v) = geom.uniform_step() {
            let (s, c) = bearing_deg.to_radians().sin_cos();
            return self.beam_energy_uniform((v[0] * s + v[1] * c) / geom.speed_of_sound() * fs);
        }
        let delays: Vec<f64> = geom
            .steering_delays(bearing_deg)
            .iter()
            .map(|t| t * fs)
            .collect();
        self.beam_energy_for_delays(&delays)
    }

    pub fn beam_energies(&self, geom: &ArrayGeometry, grid: &BearingGrid) -> Vec<f64> {
        grid.bearings()
            .iter()
            .map(|&b| self.beam_energy(geom, b))
            .collect()
    }
}

/// Chebyshev expansion of `B` for one batch on a uniform line array.
///
/// On such an array `B` depends on the bearing only through the per-element
/// delay `delta = (v . u(psi)) f_s / c`, which stays inside `[-a, a]` with
/// `a = |v| f_s / c`. There `B` is a trigonometric polynomial whose highest
/// frequency is `2 pi (M - 1)`, so a Chebyshev series converges faster than
/// geometrically. The degree is chosen from the Bessel-function tail bound
/// `sum_{k > K} |J_k(w)| <= (w/2)^K / K!` (times a safety factor) so that the
/// truncation error is below `1e-16 M ||y||^2`.
#[derive(Debug, Clone)]
pub struct BeamExpansion {
    step: [f64; 2],
    /// `f_s / c`.
    scale: f64,
    half_width: f64,
    coeffs: Vec<f64>,
}

impl BeamExpansion {
    pub const MAX_DEGREE: usize = 128;

    /// `None` if the array is not a uniform line or the required degree
    /// exceeds [`Self::MAX_DEGREE`].
    pub fn new(spectrum: &BatchSpectrum, geom: &ArrayGeometry) -> Option<Self> {
        let step = geom.uniform_step()?;
        let scale = geom.sample_rate() / geom.speed_of_sound();
        let half_width = step[0].hypot(step[1]) * scale;
        let m = spectrum.channels() as f64;
        let w = 2.0 * PI * (m - 1.0).max(0.0) * half_width;
        let nodes = Self::degree_for(w)? + 1;
        let xs: Vec<f64> = (0..nodes)
            .map(|j| (PI * (j as f64 + 0.5) / nodes as f64).cos())
            .collect();
        let fx: Vec<f64> = xs
            .iter()
            .map(|x| spectrum.beam_energy_uniform(x * half_width))
            .collect();
        // c_k = (2/K) sum_j f(x_j) T_k(x_j), with T_k by recurrence.
        let mut coeffs = vec![0.0; nodes];
        for (x, f) in xs.iter().zip(&fx) {
            let (mut t0, mut t1) = (1.0, *x);
            coeffs[0] += f;
            for c in coeffs.iter_mut().skip(1) {
                *c += f * t1;
                let t2 = 2.0 * x * t1 - t0;
                t0 = t1;
                t1 = t2;
            }
        }
        for c in coeffs.iter_mut() {
            *c *= 2.0 / nodes as f64;
        }
        coeffs[0] *= 0.5;
        Some(Self {
            step,
            scale,
            half_width,
            coeffs,
        })
    }

    fn degree_for(w: f64) -> Option<usize> {
        // ln((w/2)^K / K!) below ln(1e-18), with a floor for tiny apertures.
        let target = (1e-18f64).ln();
        let mut log_bound = 0.0;
        for k in 1..=Self::MAX_DEGREE {
            log_bound += (w / 2.0).max(f64::MIN_POSITIVE).ln() - (k as f64).ln();
            if log_bound < target && k >= 8 {
                return Some(k);
            }
        }
        None
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// `B` at a per-element delay `delta` in samples, `|delta| <= a`.
    pub fn at_delay(&self, delta: f64) -> f64 {
        let x = if self.half_width > 0.0 {
            (delta / self.half_width).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        // Clenshaw recurrence.
        let (mut b1, mut b2) = (0.0, 0.0);
        for &c in self.coeffs.iter().skip(1).rev() {
            let b0 = 2.0 * x * b1 - b2 + c;
            b2 = b1;
            b1 = b0;
        }
        x * b1 - b2 + self.coeffs[0]
    }

    pub fn beam_energy(&self, bearing_deg: f64) -> f64 {
        self.at_delay(self.delay(bearing_deg))
    }

    fn delay(&self, bearing_deg: f64) -> f64 {
        let (s, c) = bearing_deg.to_radians().sin_cos();
        (self.step[0] * s + self.step[1] * c) * self.scale
    }

    /// [`Self::beam_energy`] for many bearings. Runs several Clenshaw
    /// recurrences side by side, which hides their serial latency.
    pub fn beam_energies(&self, bearings_deg: &[f64]) -> Vec<f64> {
        const LANES: usize = 8;
        let mut out = Vec::with_capacity(bearings_deg.len());
        let mut chunks = bearings_deg.chunks_exact(LANES);
        let inv = if self.half_width > 0.0 { 1.0 / self.half_width } else { 0.0 };
        for chunk in &mut chunks {
            let mut x = [0.0; LANES];
            for (xi, b) in x.iter_mut().zip(chunk) {
                *xi = (self.delay(*b) * inv).clamp(-1.0, 1.0);
            }
            let (mut b1, mut b2) = ([0.0; LANES], [0.0; LANES]);
            for &c in self.coeffs.iter().skip(1).rev() {
                for l in 0..LANES {
                    let b0 = 2.0 * x[l] * b1[l] - b2[l] + c;
                    b2[l] = b1[l];
                    b1[l] = b0;
                }
            }
            out.extend((0..LANES).map(|l| x[l] * b1[l] - b2[l] + self.coeffs[0]));
        }
        out.extend(chunks.remainder().iter().map(|&b| self.beam_energy(b)));
        out
    }
}

/// Ordered set of bearing cells in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct BearingGrid {
    bearings: Vec<f64>,
}

impl BearingGrid {
    pub fn new(bearings: Vec<f64>) -> Result<Self> {
        if bearings.is_empty() {
            return Err(Error::InvalidParameter("empty bearing grid".into()));
        }
        if bearings.iter().any(|b| !b.is_finite()) || bearings.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "bearing grid must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self { bearings })
    }

    /// Evenly spaced grid from `start` to `end` inclusive.
    pub fn uniform(start: f64, end: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || end < start {
            return Err(Error::InvalidParameter(format!(
                "bad grid [{start}, {end}] step {step}"
            )));
        }
        let n = ((end - start) / step + 1e-9).floor() as usize + 1;
        Self::new((0..n).map(|i| start + i as f64 * step).collect())
    }

    pub fn bearings(&self) -> &[f64] {
        &self.bearings
    }

    pub fn len(&self) -> usize {
        self.bearings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bearings.is_empty()
    }

    /// Cell spacing around index `i` (half distance to each neighbour).
    pub fn cell_bounds(&self, i: usize) -> (f64, f64) {
        let b = &self.bearings;
        let lo = if i == 0 {
            b[0] - if b.len() > 1 { (b[1] - b[0]) / 2.0 } else { 0.5 }
        } else {
            (b[i - 1] + b[i]) / 2.0
        };
        let hi = if i + 1 == b.len() {
            b[i] + if b.len() > 1 { (b[i] - b[i - 1]) / 2.0 } else { 0.5 }
        } else {
            (b[i] + b[i + 1]) / 2.0
        };
        (lo, hi)
    }
}

impl Default for BearingGrid {
    fn default() -> Self {
        Self::uniform(-90.0, 90.0, 1.0).expect("default grid")
    }
}

/// Bearing-time record: one row of beamformer energies per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Btr {
    pub bearings: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl Btr {
    /// Scales the record so that its largest entry is 1. All-zero records are
    /// returned unchanged.
    pub fn normalized(&self) -> Btr {
        let max = self
            .rows
            .iter()
            .flatten()
            .fold(0.0f64, |a, &b| a.max(b));
        if max <= 0.0 {
            return self.clone();
        }
        Btr {
            bearings: self.bearings.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|v| v / max).collect())
                .collect(),
        }
    }

    /// Index of the largest entry in row `k`.
    pub fn argmax(&self, k: usize) -> Option<usize> {
        let row = self.rows.get(k)?;
        row.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }
}

/// Raw (unnormalized) bearing-time record of a batch sequence.
pub fn btr(geom: &ArrayGeometry, batches: &[SampleBatch], grid: &BearingGrid) -> Result<Btr> {
    let mut rows = Vec::with_capacity(batches.len());
    for b in batches {
        if b.channels() != geom.elements() {
            return Err(Error::DimensionMismatch(format!(
                "batch has {} channels, array has {}",
                b.channels(),
                geom.elements()
            )));
        }
        rows.push(BatchSpectrum::new(b).beam_energies(geom, grid));
    }
    Ok(Btr {
        bearings: grid.bearings().to_vec(),
        rows,
    })
}
