//! Likelihood-ratio evaluators for the particle filter.
//!
//! Each evaluator binds one measurement `z_k` and answers `ln L(z_k | x)`
//! for arbitrary states; [`BatchLikelihood::field`] and
//! [`DetectionLikelihood::field`] tabulate the same function on a grid for
//! the birth density.

use crate::array::{ArrayGeometry, BatchSpectrum, BeamExpansion, BearingGrid, SampleBatch};
use crate::detect::{detection_log_lr, ClutterModel, DetectionSet};
use crate::stats::{gauss_log_lr, t_log_lr, LikelihoodInputs, TModelParams};
use crate::tkbd::{LikelihoodField, LogLikelihoodRatio, TargetState};
use crate::{Error, Result};

/// Signal distribution of a whitened batch under the target hypothesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignalModel {
    StudentT { dof: f64 },
    Gaussian,
}

/// Likelihood ratio of one whitened sample batch.
#[derive(Debug, Clone)]
pub struct BatchLikelihood<'a> {
    geom: &'a ArrayGeometry,
    spectrum: BatchSpectrum,
    /// Fast exact-to-rounding route for uniform line arrays.
    expansion: Option<BeamExpansion>,
    model: SignalModel,
    t_params: Option<TModelParams>,
}

impl<'a> BatchLikelihood<'a> {
    pub fn new(geom: &'a ArrayGeometry, batch: &SampleBatch, model: SignalModel) -> Result<Self> {
        if batch.channels() != geom.elements() {
            return Err(Error::DimensionMismatch(format!(
                "batch has {} channels, array has {}",
                batch.channels(),
                geom.elements()
            )));
        }
        let t_params = match model {
            SignalModel::StudentT { dof } => {
                Some(TModelParams::new(dof, batch.samples(), batch.channels())?)
            }
            SignalModel::Gaussian => None,
        };
        let spectrum = BatchSpectrum::new(batch);
        Ok(Self {
            geom,
            expansion: BeamExpansion::new(&spectrum, geom),
            spectrum,
            model,
            t_params,
        })
    }

    pub fn spectrum(&self) -> &BatchSpectrum {
        &self.spectrum
    }

    fn from_beam_energy(&self, beam_energy: f64, snr_db: f64) -> Result<f64> {
        let inp = LikelihoodInputs {
            energy: self.spectrum.energy(),
            beam_energy,
            snr: 10f64.powf(snr_db / 10.0),
        };
        match &self.t_params {
            Some(p) => t_log_lr(&inp, p),
            None => Ok(gauss_log_lr(
                &inp,
                self.spectrum.len(),
                self.spectrum.channels(),
            )),
        }
    }

    pub fn beam_energy(&self, bearing_deg: f64) -> f64 {
        match &self.expansion {
            Some(e) => e.beam_energy(bearing_deg),
            None => self.spectrum.beam_energy(self.geom, bearing_deg),
        }
    }

    pub fn log_lr_at(&self, bearing_deg: f64, snr_db: f64) -> Result<f64> {
        self.from_beam_energy(self.beam_energy(bearing_deg), snr_db)
    }

    /// One beamformer evaluation per bearing cell, reused across SNR cells.
    pub fn field(&self, grid: &BearingGrid, snr_prior: (f64, f64), snr_step: f64) -> Result<LikelihoodField> {
        let beams = match &self.expansion {
            Some(e) => e.beam_energies(grid.bearings()),
            None => grid.bearings().iter().map(|&b| self.beam_energy(b)).collect(),
        };
        LikelihoodField::from_fn(grid, snr_prior, snr_step, |i, _, snr_db| {
            self.from_beam_energy(beams[i], snr_db)
        })
    }

    pub fn model(&self) -> SignalModel {
        self.model
    }
}

impl LogLikelihoodRatio for BatchLikelihood<'_> {
    fn log_lr(&self, state: &TargetState) -> Result<f64> {
        self.log_lr_at(state.bearing, state.snr_db)
    }

    fn log_lr_many(&self, states: &[TargetState]) -> Result<Vec<f64>> {
        let Some(e) = &self.expansion else {
            return states.iter().map(|x| self.log_lr(x)).collect();
        };
        let bearings: Vec<f64> = states.iter().map(|x| x.bearing).collect();
        e.beam_energies(&bearings)
            .into_iter()
            .zip(states)
            .map(|(b, x)| self.from_beam_energy(b, x.snr_db))
            .collect()
    }
}

/// Likelihood ratio of one set of detector outputs; independent of SNR.
#[derive(Debug, Clone)]
pub struct DetectionLikelihood<'a> {
    detections: &'a DetectionSet,
    clutter: ClutterModel,
}

impl<'a> DetectionLikelihood<'a> {
    pub fn new(detections: &'a DetectionSet, clutter: ClutterModel) -> Result<Self> {
        clutter.validate()?;
        Ok(Self { detections, clutter })
    }

    pub fn field(&self, grid: &BearingGrid, snr_prior: (f64, f64), snr_step: f64) -> Result<LikelihoodField> {
        let per_bearing: Vec<f64> = grid
            .bearings()
            .iter()
            .map(|&b| detection_log_lr(self.detections, b, &self.clutter))
            .collect();
        LikelihoodField::from_fn(grid, snr_prior, snr_step, |i, _, _| Ok(per_bearing[i]))
    }
}

impl LogLikelihoodRatio for DetectionLikelihood<'_> {
    fn log_lr(&self, state: &TargetState) -> Result<f64> {
        Ok(detection_log_lr(self.detections, state.bearing, &self.clutter))
    }
}
