//! Versioned TOML pipeline configuration.
//!
//! Every key has a default; a file only lists what it changes. Two default
//! profiles exist: [`PipelineConfig::real_data`] and
//! [`PipelineConfig::simulation`], which differ in survival/birth
//! probabilities and the degrees of freedom of the t model.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::array::{ArrayGeometry, BearingGrid};
use crate::detect::{CfarConfig, ClutterModel};
use crate::eval::{OspaConfig, DEFAULT_SUSTAIN};
use crate::pipeline::{CalibrationSweep, TrackerSettings, Variant};
use crate::sim::Scenario;
use crate::tkbd::FilterParams;
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Real,
    Sim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub profile: Profile,
    pub variant: Variant,
    pub seed: u64,
    /// Monte-Carlo runs.
    pub runs: usize,
    pub array: ArraySection,
    pub filter: FilterParams,
    pub signal: SignalSection,
    pub noise: NoiseSection,
    pub cfar: CfarSection,
    pub clutter: ClutterSection,
    pub grid: GridSection,
    pub calibration: CalibrationSection,
    pub scenario: Scenario,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

/// Uniform linear array along x, broadside +y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArraySection {
    pub elements: usize,
    /// Metres.
    pub spacing: f64,
    pub speed_of_sound: f64,
    /// Hz.
    pub sample_rate: f64,
}

impl Default for ArraySection {
    fn default() -> Self {
        Self {
            elements: 8,
            spacing: 0.93,
            speed_of_sound: 1500.0,
            sample_rate: 375.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalSection {
    /// Degrees of freedom of the t likelihood.
    pub dof: f64,
}

impl Default for SignalSection {
    fn default() -> Self {
        Self { dof: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub order: usize,
    /// Largest order tried by AIC selection, when set.
    pub auto_order: Option<usize>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            order: 14,
            auto_order: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfarSection {
    pub guard_cells: usize,
    pub train_cells: usize,
    pub train_rows: usize,
    pub alpha: f64,
}

impl Default for CfarSection {
    fn default() -> Self {
        let c = CfarConfig::default();
        Self {
            guard_cells: c.guard_cells,
            train_cells: c.train_cells,
            train_rows: c.train_rows,
            alpha: c.alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClutterSection {
    /// Expected false detections per batch.
    pub intensity: f64,
    pub detection_prob: f64,
    /// Degrees^2.
    pub bearing_var: f64,
}

impl Default for ClutterSection {
    fn default() -> Self {
        Self {
            intensity: 1.0,
            detection_prob: 0.9,
            bearing_var: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            start: -90.0,
            end: 90.0,
            step: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub sweep: CalibrationSweep,
    /// Target-free datasets simulated for the sweep. Fewer runs than the
    /// evaluation uses cannot see a per-run false-track rate of one in that
    /// many.
    pub runs: usize,
    /// Seconds per target-free dataset.
    pub duration: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            sweep: CalibrationSweep::default(),
            runs: 20,
            duration: 200.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ospa: OspaConfig,
    pub sustain: usize,
    pub quantiles: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ospa: OspaConfig::default(),
            sustain: DEFAULT_SUSTAIN,
            quantiles: vec![0.1, 0.5, 0.9],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::real_data()
    }
}

impl PipelineConfig {
    pub fn real_data() -> Self {
        Self {
            version: CONFIG_VERSION,
            profile: Profile::Real,
            variant: Variant::Tvar,
            seed: 1,
            runs: 1,
            array: ArraySection::default(),
            filter: FilterParams::default(),
            signal: SignalSection::default(),
            noise: NoiseSection::default(),
            cfar: CfarSection::default(),
            clutter: ClutterSection::default(),
            grid: GridSection::default(),
            calibration: CalibrationSection::default(),
            scenario: Scenario::reference(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
        }
    }

    pub fn simulation() -> Self {
        let mut c = Self::real_data();
        c.profile = Profile::Sim;
        c.filter.survival_prob = 0.99347;
        c.filter.birth_prob = 4.56e-8;
        c.signal.dof = 12.0;
        c
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Real => Self::real_data(),
            Profile::Sim => Self::simulation(),
        }
    }

    /// Parses a config whose missing keys come from the profile it names
    /// (or `base_profile` if it names none).
    pub fn from_toml_str(text: &str, base_profile: Profile) -> Result<Self> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let profile = match overlay.get("profile") {
            Some(v) => Profile::deserialize(v.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
            None => base_profile,
        };
        let mut merged = toml::Table::try_from(Self::for_profile(profile))
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, overlay);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base_profile: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, base_profile)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.filter.validate()?;
        self.scenario.validate()?;
        self.eval.ospa.validate()?;
        self.calibration.sweep.validate()?;
        if self.calibration.runs == 0 || !(self.calibration.duration > 0.0) {
            return Err(Error::Config("calibration needs at least one dataset of positive duration".into()));
        }
        self.geometry()?;
        self.tracker_settings()?;
        if self.runs == 0 {
            return Err(Error::Config("runs must be positive".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        let a = &self.array;
        ArrayGeometry::uniform_linear(a.elements, a.spacing, a.speed_of_sound, a.sample_rate)
    }

    pub fn bearing_grid(&self) -> Result<BearingGrid> {
        BearingGrid::uniform(self.grid.start, self.grid.end, self.grid.step)
    }

    pub fn tracker_settings(&self) -> Result<TrackerSettings> {
        let grid = self.bearing_grid()?;
        let span = grid.bearings().last().unwrap_or(&0.0) - grid.bearings().first().unwrap_or(&0.0);
        let cfar = CfarConfig {
            guard_cells: self.cfar.guard_cells,
            train_cells: self.cfar.train_cells,
            train_rows: self.cfar.train_rows,
            alpha: self.cfar.alpha,
            grid: grid.clone(),
        };
        cfar.validate()?;
        Ok(TrackerSettings {
            filter: self.filter.clone(),
            dof: self.signal.dof,
            cfar,
            clutter: ClutterModel::uniform(
                self.clutter.intensity,
                span.max(self.grid.step),
                self.clutter.detection_prob,
                self.clutter.bearing_var,
            )?,
            grid,
        })
    }

    /// Writes the calibrated sensitivity back into the config.
    pub fn apply_settings(&mut self, s: &TrackerSettings) {
        self.filter.snr_prior = s.filter.snr_prior;
        self.clutter.intensity = s.clutter.intensity;
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for c in [PipelineConfig::real_data(), PipelineConfig::simulation()] {
            let text = c.to_toml_string().unwrap();
            assert_eq!(PipelineConfig::from_toml_str(&text, Profile::Real).unwrap(), c);
        }
    }

    #[test]
    fn table_values_are_defaults() {
        let c = PipelineConfig::real_data();
        assert_eq!(c.filter.survival_prob, 1.0 - 1e-6);
        assert_eq!(c.filter.birth_prob, 2e-10);
        assert_eq!(c.filter.motion_noise, 0.13);
        assert_eq!(c.filter.snr_noise, 0.05);
        assert_eq!(c.filter.rate_prior_var, 0.001);
        assert_eq!(c.signal.dof, 3.0);
        assert_eq!(c.scenario.batch_len, 64);
        assert_eq!(c.filter.period, 0.17);
        assert_eq!(c.noise.order, 14);
        let s = PipelineConfig::simulation();
        assert_eq!((s.filter.survival_prob, s.filter.birth_prob, s.signal.dof), (0.99347, 4.56e-8, 12.0));
    }

    #[test]
    fn partial_file_overrides_profile() {
        let c = PipelineConfig::from_toml_str("variant = \"gvar\"\n[filter]\nn_birth = 10\n", Profile::Sim).unwrap();
        assert_eq!(c.variant, Variant::Gvar);
        assert_eq!(c.filter.n_birth, 10);
        assert_eq!(c.filter.survival_prob, 0.99347);
        let c = PipelineConfig::from_toml_str("profile = \"real\"\n", Profile::Sim).unwrap();
        assert_eq!(c.signal.dof, 3.0);
    }

    #[test]
    fn rejects_bad_files() {
        for text in [
            "colour = 1\n",
            "[filter]\nbirth_probability = 0.1\n",
            "version = 2\n",
            "variant = \"kalman\"\n",
            "[filter]\nsurvival_prob = 1.5\n",
            "[grid]\nstep = 0\n",
            "runs = 0\n",
            "seed = \n",
        ] {
            assert!(
                matches!(PipelineConfig::from_toml_str(text, Profile::Real), Err(Error::Config(_)) | Err(Error::InvalidParameter(_)) | Err(Error::InvalidGeometry(_))),
                "{text}"
            );
        }
    }
}
