//! Cell-averaging CFAR on bearing-time records and the detection-based
//! likelihood ratio used by the reference tracker.

use std::collections::VecDeque;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::array::BearingGrid;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CfarConfig {
    pub guard_cells: usize,
    pub train_cells: usize,
    /// Past BTR rows whose training cells join the current row's.
    pub train_rows: usize,
    /// Per-cell false-alarm significance.
    pub alpha: f64,
    pub grid: BearingGrid,
}

impl Default for CfarConfig {
    fn default() -> Self {
        Self {
            guard_cells: 2,
            train_cells: 16,
            train_rows: 10,
            alpha: 1e-3,
            grid: BearingGrid::default(),
        }
    }
}

impl CfarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "CFAR significance {} must lie in (0, 1)",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Upper-`alpha` quantile of the standard normal.
    pub fn threshold_sigmas(&self) -> f64 {
        Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - self.alpha)
    }
}

/// Bearings (degrees) declared as detections in one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionSet {
    pub bearings: Vec<f64>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.bearings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bearings.is_empty()
    }
}

/// CA-CFAR on the last row of `rows` (time-ordered, oldest first).
///
/// For every cell a Gaussian is fitted to the training cells
/// (`guard < |j - i| <= guard + train` in the current row and the same
/// bearing offsets in up to `train_rows` previous rows). Cells exceeding
/// `mean + z_alpha * std` are candidates; each contiguous run of candidates
/// reports only its peak cell.
pub fn cfar_detect(rows: &[Vec<f64>], cfg: &CfarConfig) -> Result<DetectionSet> {
    cfg.validate()?;
    let Some(current) = rows.last() else {
        return Ok(DetectionSet::default());
    };
    let width = cfg.grid.len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::DimensionMismatch(format!(
            "BTR rows must have {width} cells"
        )));
    }
    let first_row = rows.len().saturating_sub(cfg.train_rows + 1);
    let training = &rows[first_row..];
    let z = cfg.threshold_sigmas();

    let mut hit = vec![false; width];
    for (i, flag) in hit.iter_mut().enumerate() {
        let mut count = 0usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for off in cfg.guard_cells + 1..=cfg.guard_cells + cfg.train_cells {
            for j in [i.checked_sub(off), i.checked_add(off).filter(|j| *j < width)]
                .into_iter()
                .flatten()
            {
                for row in training {
                    let v = row[j];
                    count += 1;
                    sum += v;
                    sum_sq += v * v;
                }
            }
        }
        if count == 0 {
            continue;
        }
        let mean = sum / count as f64;
        let var = if count > 1 {
            ((sum_sq - sum * mean) / (count - 1) as f64).max(0.0)
        } else {
            0.0
        };
        *flag = current[i] > mean + z * var.sqrt();
    }

    let mut bearings = Vec::new();
    let mut i = 0;
    while i < width {
        if !hit[i] {
            i += 1;
            continue;
        }
        let mut best = i;
        while i < width && hit[i] {
            if current[i] > current[best] {
                best = i;
            }
            i += 1;
        }
        bearings.push(cfg.grid.bearings()[best]);
    }
    Ok(DetectionSet { bearings })
}

/// Streaming CFAR detector holding the recent BTR rows of one stream.
#[derive(Debug, Clone)]
pub struct CfarDetector {
    cfg: CfarConfig,
    history: VecDeque<Vec<f64>>,
}

impl CfarDetector {
    pub fn new(cfg: CfarConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            history: VecDeque::new(),
        })
    }

    pub fn config(&self) -> &CfarConfig {
        &self.cfg
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<DetectionSet> {
        if self.history.len() > self.cfg.train_rows {
            self.history.pop_front();
        }
        self.history.push_back(row);
        cfar_detect(self.history.make_contiguous(), &self.cfg)
    }
}

/// Poisson clutter and Gaussian bearing-error model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClutterModel {
    /// Expected false detections per batch.
    pub intensity: f64,
    /// Clutter density over the beamforming interval, per degree.
    pub density: f64,
    pub detection_prob: f64,
    /// Bearing measurement variance, degrees^2.
    pub bearing_var: f64,
}

impl ClutterModel {
    /// Clutter uniform over an interval of `span_deg` degrees.
    pub fn uniform(intensity: f64, span_deg: f64, detection_prob: f64, bearing_var: f64) -> Result<Self> {
        let model = Self {
            intensity,
            density: 1.0 / span_deg,
            detection_prob,
            bearing_var,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.intensity > 0.0) {
            return Err(Error::InvalidParameter("clutter intensity must be positive".into()));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::InvalidParameter("clutter density must be positive".into()));
        }
        if !(self.detection_prob > 0.0 && self.detection_prob <= 1.0) {
            return Err(Error::InvalidParameter("detection probability must be in (0, 1]".into()));
        }
        if !(self.bearing_var > 0.0) {
            return Err(Error::InvalidParameter("bearing variance must be positive".into()));
        }
        Ok(())
    }
}

/// `ln(1 - p_d + (p_d / lambda) sum_d N(psi_d; psi, R) / kappa)`.
pub fn detection_log_lr(z: &DetectionSet, bearing_deg: f64, clutter: &ClutterModel) -> f64 {
    let norm = 1.0 / (2.0 * std::f64::consts::PI * clutter.bearing_var).sqrt();
    let sum: f64 = z
        .bearings
        .iter()
        .map(|d| norm * (-(d - bearing_deg).powi(2) / (2.0 * clutter.bearing_var)).exp())
        .sum();
    let pd = clutter.detection_prob;
    (1.0 - pd + pd / clutter.intensity * sum / clutter.density).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn clutter() -> ClutterModel {
        ClutterModel::uniform(1.0, 180.0, 0.9, 4.0).unwrap()
    }

    #[test]
    fn constant_record_has_no_detections() {
        let cfg = CfarConfig::default();
        let rows = vec![vec![3.0; 181]; 5];
        assert!(cfar_detect(&rows, &cfg).unwrap().is_empty());
    }

    #[test]
    fn isolated_spike_is_detected_once() {
        let cfg = CfarConfig {
            train_cells: 40,
            alpha: 0.001,
            ..Default::default()
        };
        let mut row = vec![0.0; 181];
        row[120] = 10.0;
        let det = cfar_detect(&[row], &cfg).unwrap();
        assert_eq!(det.bearings, vec![30.0]);
    }

    #[test]
    fn runs_report_their_peak() {
        let cfg = CfarConfig {
            guard_cells: 0,
            train_cells: 30,
            alpha: 0.01,
            ..Default::default()
        };
        let mut row = vec![0.0; 181];
        row[50] = 8.0;
        row[51] = 9.0;
        row[52] = 7.0;
        let det = cfar_detect(&[row], &cfg).unwrap();
        assert_eq!(det.bearings, vec![-39.0]);
    }

    #[test]
    fn empty_and_malformed_inputs() {
        let cfg = CfarConfig::default();
        assert!(cfar_detect(&[], &cfg).unwrap().is_empty());
        assert!(cfar_detect(&[vec![1.0; 3]], &cfg).is_err());
        let bad = CfarConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(cfar_detect(&[vec![1.0; 181]], &bad).is_err());
    }

    #[test]
    fn false_alarm_rate_on_gaussian_cells() {
        let cfg = CfarConfig::default();
        let mut det = CfarDetector::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows = 1_000_000 / cfg.grid.len() + 1;
        let mut alarms = 0usize;
        let mut cells = 0usize;
        for k in 0..rows {
            let row: Vec<f64> = (0..cfg.grid.len())
                .map(|_| 10.0 + rng.sample::<f64, _>(StandardNormal))
                .collect();
            // Raw threshold crossings, counted before peak suppression.
            let mut hist: Vec<Vec<f64>> = det.history.iter().cloned().collect();
            hist.push(row.clone());
            let hist = &hist[hist.len().saturating_sub(cfg.train_rows + 1)..];
            if k >= cfg.train_rows {
                alarms += (0..cfg.grid.len())
                    .filter(|&i| cell_exceeds(hist, &cfg, i))
                    .count();
                cells += cfg.grid.len();
            }
            det.push(row).unwrap();
        }
        let rate = alarms as f64 / cells as f64;
        assert!(
            rate > cfg.alpha / 2.0 && rate < cfg.alpha * 2.0,
            "rate {rate}"
        );
    }

    /// Independent per-cell threshold test with two-pass statistics.
    fn cell_exceeds(rows: &[Vec<f64>], cfg: &CfarConfig, i: usize) -> bool {
        let width = rows[0].len();
        let mut vals = Vec::new();
        for off in cfg.guard_cells + 1..=cfg.guard_cells + cfg.train_cells {
            for j in [i.checked_sub(off), Some(i + off).filter(|j| *j < width)]
                .into_iter()
                .flatten()
            {
                for row in rows {
                    vals.push(row[j]);
                }
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        rows.last().unwrap()[i] > mean + cfg.threshold_sigmas() * var.sqrt()
    }

    #[test]
    fn empty_detection_set() {
        let v = detection_log_lr(&DetectionSet::default(), 10.0, &clutter());
        assert_abs_diff_eq!(v, 0.1f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn single_detection_on_target() {
        let z = DetectionSet {
            bearings: vec![12.0],
        };
        let v = detection_log_lr(&z, 12.0, &clutter());
        // ln(0.1 + 0.9 * 180 / sqrt(8 pi)), evaluated independently.
        assert_abs_diff_eq!(v, 3.478_600_445_848_367_7, epsilon = 1e-12);
    }

    #[test]
    fn distant_detection_is_negligible() {
        let c = clutter();
        let far = DetectionSet {
            bearings: vec![12.0 + 50.0 * 2.0],
        };
        assert_abs_diff_eq!(detection_log_lr(&far, 12.0, &c), 0.1f64.ln(), epsilon = 1e-12);

        let near = DetectionSet {
            bearings: vec![-20.0],
        };
        let both = DetectionSet {
            bearings: vec![-20.0, 80.0],
        };
        let a = detection_log_lr(&near, -21.0, &c);
        let b = detection_log_lr(&both, -21.0, &c);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn maximized_at_the_detection() {
        let c = clutter();
        let z = DetectionSet {
            bearings: vec![33.0],
        };
        let peak = detection_log_lr(&z, 33.0, &c);
        for psi in [-90.0, 0.0, 32.0, 33.5, 40.0, 90.0] {
            assert!(detection_log_lr(&z, psi, &c) < peak);
        }
    }

    #[test]
    fn clutter_validation() {
        assert!(ClutterModel::uniform(0.0, 180.0, 0.9, 4.0).is_err());
        assert!(ClutterModel::uniform(1.0, 180.0, 0.0, 4.0).is_err());
        assert!(ClutterModel::uniform(1.0, 180.0, 0.9, 0.0).is_err());
    }
}
