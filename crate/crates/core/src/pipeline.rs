//! Tracker variants and the per-batch driver shared by the CLI and tests.
//!
//! * `tvar`: VAR whitening + multivariate-t likelihood
//! * `tvar0`: the same with an order-0 (spatial-only) noise model
//! * `gvar`: VAR whitening + Gaussian likelihood
//! * `cfar`: CA-CFAR detections on the raw BTR + detection likelihood

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::{ArrayGeometry, BatchSpectrum, BearingGrid, SampleBatch};
use crate::detect::{CfarConfig, CfarDetector, ClutterModel, DetectionSet};
use crate::eval::{first_sustained, TrackLog, TrackRow};
use crate::likelihood::{BatchLikelihood, DetectionLikelihood, SignalModel};
use crate::noise::{whiten_block, VarModel, WhitenState};
use crate::sim::split_batches;
use crate::tkbd::{self, BernoulliBelief, FilterParams, LikelihoodField};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tvar,
    Tvar0,
    Gvar,
    Cfar,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Tvar, Variant::Tvar0, Variant::Gvar, Variant::Cfar];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Tvar => "tvar",
            Variant::Tvar0 => "tvar0",
            Variant::Gvar => "gvar",
            Variant::Cfar => "cfar",
        }
    }

    /// Whether the variant consumes whitened samples.
    pub fn whitens(&self) -> bool {
        !matches!(self, Variant::Cfar)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown tracker variant '{s}'")))
    }
}

/// Everything a tracker needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerSettings {
    pub filter: FilterParams,
    /// Degrees of freedom of the t likelihood.
    pub dof: f64,
    pub cfar: CfarConfig,
    pub clutter: ClutterModel,
    pub grid: BearingGrid,
}

/// One batch ready for a tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub batch: SampleBatch,
    /// False when whitening had not yet seen `p` earlier samples; such
    /// batches only advance the filter in time.
    pub usable: bool,
}

/// The order-0 model with the process's stationary covariance.
pub fn spatial_only(model: &VarModel) -> Result<VarModel> {
    VarModel::new(Vec::new(), model.stationary_covariance()?)
}

/// Whitens the continuous sample stream (if the variant needs it) and cuts
/// it into batches.
pub fn prepare(
    variant: Variant,
    samples: &DMatrix<f64>,
    batch_len: usize,
    model: Option<&VarModel>,
) -> Result<Vec<PreparedBatch>> {
    if batch_len == 0 || batch_len % 2 == 1 {
        return Err(Error::UnsupportedBatchLength(batch_len));
    }
    if !variant.whitens() {
        return Ok(split_batches(samples, batch_len)?
            .into_iter()
            .map(|batch| PreparedBatch {
                batch,
                usable: true,
            })
            .collect());
    }
    let model = model.ok_or_else(|| Error::Config(format!("variant {variant} needs a noise model")))?;
    if model.channels() != samples.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "noise model has {} channels, data has {}",
            model.channels(),
            samples.ncols()
        )));
    }
    let mut state = WhitenState::new(model);
    let (white, warm) = whiten_block(model, &mut state, samples)?;
    Ok(split_batches(&white, batch_len)?
        .into_iter()
        .enumerate()
        .map(|(k, batch)| PreparedBatch {
            batch,
            usable: k * batch_len >= warm,
        })
        .collect())
}

enum Measurement<'g> {
    Samples(BatchLikelihood<'g>),
    Detections(DetectionSet),
}

/// A single tracker instance running over one batch stream.
pub struct Tracker<'g> {
    variant: Variant,
    geom: &'g ArrayGeometry,
    settings: TrackerSettings,
    detector: Option<CfarDetector>,
    belief: BernoulliBelief,
    birth_field: LikelihoodField,
    step: usize,
}

impl<'g> Tracker<'g> {
    pub fn new(variant: Variant, geom: &'g ArrayGeometry, settings: TrackerSettings) -> Result<Self> {
        settings.filter.validate()?;
        settings.clutter.validate()?;
        let detector = match variant {
            Variant::Cfar => Some(CfarDetector::new(CfarConfig {
                grid: settings.grid.clone(),
                ..settings.cfar.clone()
            })?),
            _ => {
                if !(settings.dof > 2.0) {
                    return Err(Error::InvalidParameter(format!(
                        "degrees of freedom {} must exceed 2",
                        settings.dof
                    )));
                }
                None
            }
        };
        let birth_field = LikelihoodField::uniform(&settings.grid, settings.filter.snr_prior, settings.filter.snr_step)?;
        Ok(Self {
            variant,
            geom,
            settings,
            detector,
            belief: BernoulliBelief::empty(),
            birth_field,
            step: 0,
        })
    }

    pub fn belief(&self) -> &BernoulliBelief {
        &self.belief
    }

    /// Predict with the previous batch's birth field, then update with this
    /// batch. Returns the log row and any CFAR detections.
    pub fn step<R: Rng + ?Sized>(&mut self, input: &PreparedBatch, rng: &mut R) -> Result<(TrackRow, Option<DetectionSet>)> {
        let params = &self.settings.filter;
        let predicted = tkbd::predict(&self.belief, params, &self.birth_field, rng);
        let measurement = match self.variant {
            Variant::Cfar => {
                let row = BatchSpectrum::new(&input.batch).beam_energies(self.geom, &self.settings.grid);
                let det = self.detector.as_mut().expect("cfar tracker has a detector");
                Some(Measurement::Detections(det.push(row)?))
            }
            _ if !input.usable => None,
            v => {
                let model = if v == Variant::Gvar {
                    SignalModel::Gaussian
                } else {
                    SignalModel::StudentT { dof: self.settings.dof }
                };
                Some(Measurement::Samples(BatchLikelihood::new(self.geom, &input.batch, model)?))
            }
        };
        let (prior, snr_step, grid) = (params.snr_prior, params.snr_step, &self.settings.grid);
        let (belief, field, detections) = match measurement {
            None => (
                predicted,
                LikelihoodField::uniform(grid, prior, snr_step)?,
                None,
            ),
            Some(Measurement::Samples(lik)) => {
                let (b, _) = tkbd::update(&predicted, &lik, params, rng)?;
                (b, lik.field(grid, prior, snr_step)?, None)
            }
            Some(Measurement::Detections(z)) => {
                let lik = DetectionLikelihood::new(&z, self.settings.clutter)?;
                let (b, _) = tkbd::update(&predicted, &lik, params, rng)?;
                let f = lik.field(grid, prior, snr_step)?;
                (b, f, Some(z))
            }
        };
        self.belief = belief;
        self.birth_field = field;
        let est = tkbd::extract(&self.belief, params);
        let row = TrackRow {
            batch_index: input.batch.index(),
            time_s: self.step as f64 * params.period,
            q: self.belief.q,
            psi_est_deg: est.map_or(f64::NAN, |e| e.state.bearing),
            psidot_est: est.map_or(f64::NAN, |e| e.state.bearing_rate),
            eta_db_est: est.map_or(f64::NAN, |e| e.state.snr_db),
            confirmed: est.is_some_and(|e| e.confirmed),
        };
        self.step += 1;
        Ok((row, detections))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackOutput {
    pub log: TrackLog,
    /// `(batch_index, bearing_deg)`; CFAR variant only.
    pub detections: Vec<(usize, f64)>,
}

/// Runs a tracker over a batch stream. With `stop_after_sustained = Some(n)`
/// the run ends as soon as `n` consecutive batches were confirmed.
pub fn run_tracker<R: Rng + ?Sized>(
    variant: Variant,
    geom: &ArrayGeometry,
    settings: &TrackerSettings,
    batches: &[PreparedBatch],
    rng: &mut R,
    stop_after_sustained: Option<usize>,
) -> Result<TrackOutput> {
    let mut tracker = Tracker::new(variant, geom, settings.clone())?;
    let mut out = TrackOutput::default();
    let mut run = 0;
    for b in batches {
        let (row, det) = tracker.step(b, rng)?;
        if let Some(z) = det {
            out.detections
                .extend(z.bearings.iter().map(|&d| (row.batch_index, d)));
        }
        run = if row.confirmed { run + 1 } else { 0 };
        out.log.rows.push(row);
        if stop_after_sustained.is_some_and(|n| run >= n) {
            break;
        }
    }
    Ok(out)
}

/// Sweep of the sensitivity knob used for prior calibration.
///
/// Level `s` (dB) lowers the SNR prior to `[lo - s, hi - s]` for the
/// sample-based variants and scales the clutter intensity to
/// `lambda * 10^(-s/10)` for `cfar`; larger `s` is more sensitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSweep {
    /// Least sensitive level, tried first.
    pub start_db: f64,
    /// Most sensitive level tried.
    pub stop_db: f64,
    /// Stride of the first pass; the interval holding the first false track
    /// is then refined at `step_db`.
    pub coarse_step_db: f64,
    pub step_db: f64,
    /// Back-off from the most sensitive clean level to the applied one.
    pub margin_db: f64,
    /// Consecutive confirmed batches that count as a false track.
    pub sustain: usize,
}

impl Default for CalibrationSweep {
    fn default() -> Self {
        Self {
            start_db: -20.0,
            stop_db: 20.0,
            coarse_step_db: 4.0,
            step_db: 1.0,
            margin_db: 2.0,
            sustain: crate::eval::DEFAULT_SUSTAIN,
        }
    }
}

impl CalibrationSweep {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.start_db, self.stop_db, self.coarse_step_db, self.step_db, self.margin_db]
            .iter()
            .all(|v| v.is_finite());
        if !finite
            || self.step_db <= 0.0
            || self.coarse_step_db < self.step_db
            || self.stop_db < self.start_db
            || self.margin_db < 0.0
            || self.sustain == 0
        {
            return Err(Error::InvalidParameter(format!("invalid calibration sweep {self:?}")));
        }
        Ok(())
    }
}

/// Settings at sensitivity level `s` relative to `base`.
pub fn at_sensitivity(variant: Variant, base: &TrackerSettings, s: f64) -> TrackerSettings {
    let mut out = base.clone();
    match variant {
        Variant::Cfar => out.clutter.intensity = base.clutter.intensity * 10f64.powf(-s / 10.0),
        _ => {
            out.filter.snr_prior = (base.filter.snr_prior.0 - s, base.filter.snr_prior.1 - s);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    /// Most sensitive level without false tracks; `None` if even the start
    /// level produced one.
    pub level_db: Option<f64>,
    /// `level_db - margin_db`, the level `settings` were built at.
    pub applied_db: Option<f64>,
    pub settings: Option<TrackerSettings>,
    /// `(level, runs with a false track)` in the order tried. A level stops
    /// at its first false track, so the count is 0 or 1.
    pub trials: Vec<(f64, usize)>,
}

/// Raises the sensitivity on target-free data until a false track appears.
///
/// A coarse pass brackets the first false track, which is then located at
/// `step_db` resolution. `rng_for_run(i)` supplies the filter randomness of
/// run `i` and is re-created at every level so that levels differ only in
/// settings.
pub fn calibrate<R, F>(
    variant: Variant,
    geom: &ArrayGeometry,
    base: &TrackerSettings,
    target_free: &[Vec<PreparedBatch>],
    sweep: &CalibrationSweep,
    mut rng_for_run: F,
) -> Result<CalibrationResult>
where
    R: Rng,
    F: FnMut(usize) -> R,
{
    sweep.validate()?;
    let mut trials = Vec::new();
    let mut clean = |level: f64| -> Result<bool> {
        let settings = at_sensitivity(variant, base, level);
        let mut failures = 0;
        for (r, data) in target_free.iter().enumerate() {
            let out = run_tracker(variant, geom, &settings, data, &mut rng_for_run(r), Some(sweep.sustain))?;
            if first_sustained(&out.log.confirmed(), sweep.sustain).is_some() {
                failures = 1;
                break;
            }
        }
        log::info!("calibration {variant}: level {level} dB, false track: {}", failures > 0);
        trials.push((level, failures));
        Ok(failures == 0)
    };

    let mut best = None;
    let mut level = sweep.start_db;
    let mut failed_at = None;
    loop {
        if !clean(level)? {
            failed_at = Some(level);
            break;
        }
        best = Some(level);
        if level >= sweep.stop_db {
            break;
        }
        level = (level + sweep.coarse_step_db).min(sweep.stop_db);
    }
    if let (Some(lo), Some(hi)) = (best, failed_at) {
        let mut level = lo + sweep.step_db;
        while level < hi - 1e-9 && clean(level)? {
            best = Some(level);
            level += sweep.step_db;
        }
    }
    let applied_db = best.map(|l| l - sweep.margin_db);
    Ok(CalibrationResult {
        level_db: best,
        applied_db,
        settings: applied_db.map(|l| at_sensitivity(variant, base, l)),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_dataset, Scenario};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom() -> ArrayGeometry {
        ArrayGeometry::uniform_linear(8, 0.93, 1500.0, 375.0).unwrap()
    }

    fn settings() -> TrackerSettings {
        TrackerSettings {
            filter: FilterParams {
                n_persist: 300,
                n_birth: 100,
                ..Default::default()
            },
            dof: 3.0,
            cfar: CfarConfig::default(),
            clutter: ClutterModel::uniform(1.0, 180.0, 0.9, 4.0).unwrap(),
            grid: BearingGrid::default(),
        }
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("kalman".parse::<Variant>().is_err());
    }

    #[test]
    fn spatial_only_model_keeps_the_marginal_covariance() {
        let m = VarModel::synthetic_ambient(4, 3).unwrap();
        let s = spatial_only(&m).unwrap();
        assert_eq!(s.order(), 0);
        assert_eq!(s.innovation_cov(), &m.stationary_covariance().unwrap());
    }

    #[test]
    fn warm_up_batches_are_flagged() {
        let m = VarModel::synthetic_ambient(8, 14).unwrap();
        let data = DMatrix::from_fn(64 * 3, 8, |r, c| ((r * 7 + c) % 5) as f64);
        let p = prepare(Variant::Tvar, &data, 64, Some(&m)).unwrap();
        assert_eq!(p.iter().map(|b| b.usable).collect::<Vec<_>>(), [false, true, true]);
        let raw = prepare(Variant::Cfar, &data, 64, None).unwrap();
        assert!(raw.iter().all(|b| b.usable));
        assert_eq!(raw[1].batch.data(), &data.rows(64, 64).into_owned());
        assert!(prepare(Variant::Gvar, &data, 64, None).is_err());
        let m4 = VarModel::synthetic_ambient(4, 2).unwrap();
        assert!(prepare(Variant::Tvar, &data, 64, Some(&m4)).is_err());
    }

    #[test]
    fn tracking_is_deterministic_and_aligned() {
        let g = geom();
        let m = VarModel::synthetic_ambient(8, 4).unwrap();
        let s = Scenario::compressed(8.0);
        let (batches, truth) = generate_dataset(&s, &g, &m, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let ds = crate::sim::Dataset::from_batches(&g, &batches, Some(truth.clone()), None, None).unwrap();
        for v in Variant::ALL {
            let model = if v == Variant::Tvar0 { spatial_only(&m).unwrap() } else { m.clone() };
            let prep = prepare(v, &ds.samples, 64, Some(&model)).unwrap();
            let a = run_tracker(v, &g, &settings(), &prep, &mut ChaCha8Rng::seed_from_u64(9), None).unwrap();
            let b = run_tracker(v, &g, &settings(), &prep, &mut ChaCha8Rng::seed_from_u64(9), None).unwrap();
            assert_eq!(a.log.len(), truth.len());
            for (x, y) in a.log.rows.iter().zip(&b.log.rows) {
                assert_eq!(x.q.to_bits(), y.q.to_bits());
                assert_eq!(x.psi_est_deg.to_bits(), y.psi_est_deg.to_bits());
            }
        }
    }

    #[test]
    fn sensitivity_shifts() {
        let base = settings();
        let t = at_sensitivity(Variant::Tvar, &base, 3.0);
        assert_eq!(t.filter.snr_prior, (-18.0, -8.0));
        let c = at_sensitivity(Variant::Cfar, &base, 10.0);
        assert!((c.clutter.intensity - 0.1).abs() < 1e-15);
    }
}
