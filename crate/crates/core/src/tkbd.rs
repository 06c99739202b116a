//! Bernoulli particle filter for a single bearing-only target.
//!
//! The belief is an existence probability `q` plus a weighted particle set
//! for the state density. Each step runs [`predict`] (survival, motion and
//! likelihood-driven birth) followed by [`update`] with any evaluator of the
//! log-likelihood ratio `ln L(z_k | x)`; the filter code does not know which
//! measurement model produced it.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::array::BearingGrid;
use crate::{Error, Result};

/// Edge of the beamforming interval, degrees.
pub const MAX_BEARING: f64 = 90.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetState {
    /// Degrees.
    pub bearing: f64,
    /// Degrees per second.
    pub bearing_rate: f64,
    pub snr_db: f64,
}

impl TargetState {
    pub fn snr(&self) -> f64 {
        10f64.powf(self.snr_db / 10.0)
    }

    /// Reflects the bearing back into `[-90, 90]`, reversing its rate.
    fn reflect(mut self) -> Self {
        for _ in 0..4 {
            if self.bearing > MAX_BEARING {
                self.bearing = 2.0 * MAX_BEARING - self.bearing;
                self.bearing_rate = -self.bearing_rate;
            } else if self.bearing < -MAX_BEARING {
                self.bearing = -2.0 * MAX_BEARING - self.bearing;
                self.bearing_rate = -self.bearing_rate;
            } else {
                return self;
            }
        }
        self.bearing = self.bearing.clamp(-MAX_BEARING, MAX_BEARING);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    pub birth_prob: f64,
    pub survival_prob: f64,
    /// Seconds between batches.
    pub period: f64,
    /// Constant-velocity process noise, deg/s^2.
    pub motion_noise: f64,
    /// SNR random-walk process noise, dB/s.
    pub snr_noise: f64,
    /// Prior variance of the bearing rate of a new target, deg^2/s^2.
    pub rate_prior_var: f64,
    pub confirm_threshold: f64,
    pub n_persist: usize,
    pub n_birth: usize,
    /// Uniform SNR prior of new targets, dB.
    pub snr_prior: (f64, f64),
    /// Cell size of the birth field along the SNR axis, dB.
    pub snr_step: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            birth_prob: 2e-10,
            survival_prob: 1.0 - 1e-6,
            period: 0.17,
            motion_noise: 0.13,
            snr_noise: 0.05,
            rate_prior_var: 0.001,
            confirm_threshold: 0.9,
            n_persist: 2000,
            n_birth: 500,
            snr_prior: (-15.0, -5.0),
            snr_step: 1.0,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64, name: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} = {v} is not a probability")))
            }
        };
        prob(self.birth_prob, "birth probability")?;
        prob(self.survival_prob, "survival probability")?;
        prob(self.confirm_threshold, "confirmation threshold")?;
        if self.n_persist == 0 || self.n_birth == 0 {
            return Err(Error::InvalidParameter("particle counts must be positive".into()));
        }
        if !(self.snr_prior.0 < self.snr_prior.1) {
            return Err(Error::InvalidParameter(format!(
                "SNR prior [{}, {}] is empty",
                self.snr_prior.0, self.snr_prior.1
            )));
        }
        for (v, name) in [
            (self.period, "period"),
            (self.motion_noise, "motion noise"),
            (self.snr_noise, "SNR noise"),
            (self.rate_prior_var, "rate prior variance"),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {v}")));
            }
        }
        if !(self.snr_step > 0.0) {
            return Err(Error::InvalidParameter("SNR step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliBelief {
    pub q: f64,
    states: Vec<TargetState>,
    weights: Vec<f64>,
}

impl Default for BernoulliBelief {
    fn default() -> Self {
        Self::empty()
    }
}

impl BernoulliBelief {
    /// No target, no particles.
    pub fn empty() -> Self {
        Self {
            q: 0.0,
            states: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn new(q: f64, states: Vec<TargetState>, weights: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidParameter(format!("existence probability {q}")));
        }
        if states.len() != weights.len() {
            return Err(Error::DimensionMismatch("states and weights differ in length".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("weights must be finite and non-negative".into()));
        }
        let mut b = Self { q, states, weights };
        b.normalize();
        Ok(b)
    }

    pub fn states(&self) -> &[TargetState] {
        &self.states
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    fn normalize(&mut self) {
        let total: f64 = self.weights.iter().sum();
        if total > 0.0 {
            for w in &mut self.weights {
                *w /= total;
            }
        }
    }
}

/// Anything that evaluates `ln L(z_k | x)` for the current measurement.
pub trait LogLikelihoodRatio {
    fn log_lr(&self, state: &TargetState) -> Result<f64>;

    /// `ln L` for every state in order; evaluators with a cheaper batch
    /// route override this.
    fn log_lr_many(&self, states: &[TargetState]) -> Result<Vec<f64>> {
        states.iter().map(|x| self.log_lr(x)).collect()
    }
}

impl<F> LogLikelihoodRatio for F
where
    F: Fn(&TargetState) -> Result<f64>,
{
    fn log_lr(&self, state: &TargetState) -> Result<f64> {
        self(state)
    }
}

/// `ln L` on a bearing x SNR grid, used as the birth density.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodField {
    grid: BearingGrid,
    snr_lo: f64,
    snr_hi: f64,
    snr_step: f64,
    /// Bearing-major: `values[i * snr_cells + j]`.
    values: Vec<f64>,
}

impl LikelihoodField {
    /// Field on bearing cells x SNR cells of width `step` covering `[lo, hi]`;
    /// `f(bearing, snr_db)` is evaluated at cell centres.
    pub fn from_fn<F>(grid: &BearingGrid, snr_prior: (f64, f64), step: f64, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, f64, f64) -> Result<f64>,
    {
        let (lo, hi) = snr_prior;
        if !(lo < hi) || !(step > 0.0) {
            return Err(Error::InvalidParameter(format!("SNR cells [{lo}, {hi}] step {step}")));
        }
        let cells = ((hi - lo) / step).ceil().max(1.0) as usize;
        let mut values = Vec::with_capacity(grid.len() * cells);
        for (i, &b) in grid.bearings().iter().enumerate() {
            for j in 0..cells {
                let (a, z) = Self::snr_cell(lo, hi, step, j);
                values.push(f(i, b, 0.5 * (a + z))?);
            }
        }
        Ok(Self {
            grid: grid.clone(),
            snr_lo: lo,
            snr_hi: hi,
            snr_step: step,
            values,
        })
    }

    /// Flat field, used before the first measurement.
    pub fn uniform(grid: &BearingGrid, snr_prior: (f64, f64), step: f64) -> Result<Self> {
        Self::from_fn(grid, snr_prior, step, |_, _, _| Ok(0.0))
    }

    fn snr_cell(lo: f64, hi: f64, step: f64, j: usize) -> (f64, f64) {
        let a = lo + j as f64 * step;
        (a, (a + step).min(hi))
    }

    pub fn snr_cells(&self) -> usize {
        self.values.len() / self.grid.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn grid(&self) -> &BearingGrid {
        &self.grid
    }

    /// Value of the cell containing `(bearing, snr_db)` (nearest cell outside the support).
    pub fn value_at(&self, bearing: f64, snr_db: f64) -> f64 {
        let b = self.grid.bearings();
        let i = match b.binary_search_by(|v| v.total_cmp(&bearing)) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) if i == b.len() => b.len() - 1,
            Err(i) => {
                if bearing - b[i - 1] <= b[i] - bearing {
                    i - 1
                } else {
                    i
                }
            }
        };
        let cells = self.snr_cells();
        let j = (((snr_db - self.snr_lo) / self.snr_step).floor().max(0.0) as usize).min(cells - 1);
        self.values[i * cells + j]
    }
}

/// Constant-velocity bearing, random-walk SNR: `x' = F x + G v`, `v ~ N(0, Q)`.
pub fn motion_step<R: Rng + ?Sized>(x: &TargetState, params: &FilterParams, rng: &mut R) -> TargetState {
    let t = params.period;
    let accel = params.motion_noise * rng.sample::<f64, _>(StandardNormal);
    let drift = params.snr_noise * rng.sample::<f64, _>(StandardNormal);
    TargetState {
        bearing: x.bearing + t * x.bearing_rate + 0.5 * t * t * accel,
        bearing_rate: x.bearing_rate + t * accel,
        snr_db: x.snr_db + t * drift,
    }
    .reflect()
}

/// Draws `n` new-target states with `(bearing, SNR)` density proportional to
/// `exp(field)` over the prior support and the bearing rate from its prior.
pub fn sample_birth<R: Rng + ?Sized>(
    field: &LikelihoodField,
    params: &FilterParams,
    n: usize,
    rng: &mut R,
) -> Vec<TargetState> {
    let max = field
        .values
        .iter()
        .copied()
        .filter(|v| v.is_finite() || *v == f64::INFINITY)
        .fold(f64::NEG_INFINITY, f64::max);
    let cells = field.snr_cells();
    let volume = |idx: usize| {
        let (b_lo, b_hi) = field.grid.cell_bounds(idx / cells);
        let (s_lo, s_hi) = LikelihoodField::snr_cell(field.snr_lo, field.snr_hi, field.snr_step, idx % cells);
        (b_hi.min(MAX_BEARING) - b_lo.max(-MAX_BEARING)).max(0.0) * (s_hi - s_lo)
    };
    let mut cdf: Vec<f64> = Vec::with_capacity(field.values.len());
    let mut acc = 0.0;
    for (idx, v) in field.values.iter().enumerate() {
        let w = if max.is_finite() && v.is_finite() {
            (v - max).exp() * volume(idx)
        } else {
            0.0
        };
        acc += w;
        cdf.push(acc);
    }
    if !(acc > 0.0) || !acc.is_finite() {
        // No usable likelihood anywhere: fall back to the flat prior.
        acc = 0.0;
        cdf.clear();
        for idx in 0..field.values.len() {
            acc += volume(idx);
            cdf.push(acc);
        }
    }
    let rate = Normal::new(0.0, params.rate_prior_var.sqrt()).unwrap();
    let unit = Uniform::new(0.0f64, 1.0);
    (0..n)
        .map(|_| {
            let u = unit.sample(rng) * acc;
            let idx = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
            let (i, j) = (idx / cells, idx % cells);
            let (b_lo, b_hi) = field.grid.cell_bounds(i);
            let b_lo = b_lo.max(-MAX_BEARING);
            let b_hi = b_hi.min(MAX_BEARING);
            let (s_lo, s_hi) = LikelihoodField::snr_cell(field.snr_lo, field.snr_hi, field.snr_step, j);
            TargetState {
                bearing: b_lo + (b_hi - b_lo) * unit.sample(rng),
                bearing_rate: rate.sample(rng),
                snr_db: s_lo + (s_hi - s_lo) * unit.sample(rng),
            }
        })
        .collect()
}

/// Time update: `q <- p_b (1 - q) + p_s q`; survivors move with the motion
/// model and newborn particles are drawn from `birth_field`.
pub fn predict<R: Rng + ?Sized>(
    belief: &BernoulliBelief,
    params: &FilterParams,
    birth_field: &LikelihoodField,
    rng: &mut R,
) -> BernoulliBelief {
    let q_old = if belief.is_empty() { 0.0 } else { belief.q };
    let q = params.birth_prob * (1.0 - q_old) + params.survival_prob * q_old;
    if q <= 0.0 {
        return BernoulliBelief {
            q: 0.0,
            ..belief.clone()
        };
    }
    let survive = params.survival_prob * q_old / q;
    let born = params.birth_prob * (1.0 - q_old) / q;

    let mut states = Vec::with_capacity(belief.len() + params.n_birth);
    let mut weights = Vec::with_capacity(belief.len() + params.n_birth);
    if survive > 0.0 {
        for (x, w) in belief.states.iter().zip(&belief.weights) {
            states.push(motion_step(x, params, rng));
            weights.push(w * survive);
        }
    }
    if born > 0.0 {
        let each = born / params.n_birth as f64;
        states.extend(sample_birth(birth_field, params, params.n_birth, rng));
        weights.resize(states.len(), each);
    }
    let mut out = BernoulliBelief {
        q: q.min(1.0),
        states,
        weights,
    };
    out.normalize();
    out
}

/// Diagnostics of one measurement update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateInfo {
    /// `ln sum_i w_i L(z | x_i)`.
    pub log_evidence: f64,
    pub resampled: bool,
    /// The evidence vanished and the belief was reset to "no target".
    pub collapsed: bool,
}

/// Measurement update with systematic resampling back to `n_persist`
/// particles when the set has grown beyond it or its effective sample size
/// fell below `n_persist / 2`.
pub fn update<R: Rng + ?Sized, L: LogLikelihoodRatio + ?Sized>(
    belief: &BernoulliBelief,
    lr: &L,
    params: &FilterParams,
    rng: &mut R,
) -> Result<(BernoulliBelief, UpdateInfo)> {
    if belief.is_empty() {
        return Ok((
            belief.clone(),
            UpdateInfo {
                log_evidence: 0.0,
                resampled: false,
                collapsed: false,
            },
        ));
    }
    let lrs = lr.log_lr_many(&belief.states)?;
    let mut log_w = Vec::with_capacity(belief.len());
    for ((x, w), l) in belief.states.iter().zip(&belief.weights).zip(lrs) {
        if l.is_nan() {
            return Err(Error::NumericalDomain(format!("NaN likelihood ratio at {x:?}")));
        }
        log_w.push(if *w > 0.0 { w.ln() + l } else { f64::NEG_INFINITY });
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        log::debug!("likelihood evidence vanished; belief reset");
        return Ok((
            BernoulliBelief::empty(),
            UpdateInfo {
                log_evidence: f64::NEG_INFINITY,
                resampled: false,
                collapsed: true,
            },
        ));
    }
    if max == f64::INFINITY {
        return Err(Error::NumericalDomain("infinite likelihood ratio".into()));
    }
    let sum: f64 = log_w.iter().map(|l| (l - max).exp()).sum();
    let log_evidence = max + sum.ln();
    let weights: Vec<f64> = log_w.iter().map(|l| (l - max).exp() / sum).collect();

    let q = belief.q;
    let q_new = if q <= 0.0 {
        0.0
    } else if q >= 1.0 {
        1.0
    } else {
        // q I / (1 - q + q I) as a logistic of the posterior log-odds.
        let log_odds = q.ln() - (-q).ln_1p() + log_evidence;
        1.0 / (1.0 + (-log_odds).exp())
    };

    let mut out = BernoulliBelief {
        q: q_new,
        states: belief.states.clone(),
        weights,
    };
    let resampled = out.len() > params.n_persist
        || out.effective_sample_size() < params.n_persist as f64 / 2.0;
    if resampled {
        out = systematic_resample(&out, params.n_persist, rng.gen::<f64>());
    }
    Ok((
        out,
        UpdateInfo {
            log_evidence,
            resampled,
            collapsed: false,
        },
    ))
}

/// Systematic resampling with the single offset `u in [0, 1)`.
pub fn systematic_resample(belief: &BernoulliBelief, n: usize, u: f64) -> BernoulliBelief {
    let mut states = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut i = 0;
    let last = belief.len() - 1;
    for k in 0..n {
        let target = (k as f64 + u) / n as f64;
        while i < last && cum + belief.weights[i] <= target {
            cum += belief.weights[i];
            i += 1;
        }
        states.push(belief.states[i]);
    }
    BernoulliBelief {
        q: belief.q,
        states,
        weights: vec![1.0 / n as f64; n],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub state: TargetState,
    pub q: f64,
    pub confirmed: bool,
}

/// Weighted-mean state estimate; confirmed when `q > threshold`.
pub fn extract(belief: &BernoulliBelief, params: &FilterParams) -> Option<Estimate> {
    if belief.is_empty() {
        return None;
    }
    let mut s = TargetState {
        bearing: 0.0,
        bearing_rate: 0.0,
        snr_db: 0.0,
    };
    for (x, w) in belief.states.iter().zip(&belief.weights) {
        s.bearing += w * x.bearing;
        s.bearing_rate += w * x.bearing_rate;
        s.snr_db += w * x.snr_db;
    }
    Some(Estimate {
        state: s,
        q: belief.q,
        confirmed: belief.q > params.confirm_threshold,
    })
}
