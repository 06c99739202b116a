//! Scenario definition and synthetic array data.
//!
//! A batch is generated as `y = sqrt(nu / c) (s + e)` where `e` is a block
//! of a continuous VAR noise stream, `s = H(psi) x` with white
//! `x ~ N(0, eta sigma_e^2 I)`, `sigma_e^2 = det(E[e e^T])^(1/M)` and
//! `c ~ chi^2(nu)` drawn once per batch.
//!
//! Datasets live in a directory holding `metadata.toml`, `samples.f32`
//! (row-major `T x M` little-endian 32-bit floats) and, for simulated data,
//! `truth.csv`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::{ArrayGeometry, SampleBatch, SteeringOperator};
use crate::noise::{VarModel, VarSimulator};
use crate::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const METADATA_FILE: &str = "metadata.toml";
pub const SAMPLES_FILE: &str = "samples.f32";
pub const TRUTH_FILE: &str = "truth.csv";

/// Propagation loss `eta_dB = -10 log10((r / r_ref)^exponent)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeToSnr {
    pub reference_range: f64,
    pub exponent: f64,
}

impl Default for RangeToSnr {
    fn default() -> Self {
        Self {
            reference_range: 200.0,
            exponent: 1.8,
        }
    }
}

impl RangeToSnr {
    pub fn snr_db(&self, range: f64) -> f64 {
        -10.0 * self.exponent * (range / self.reference_range).log10()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Target path in metres, relative to the array centre.
    pub waypoints: Vec<[f64; 2]>,
    /// Metres per second along the path; the target stops at the last waypoint.
    pub speed: f64,
    /// Seconds.
    pub duration: f64,
    pub batch_len: usize,
    #[serde(default)]
    pub range_to_snr: RangeToSnr,
    /// Degrees of freedom of the batch scaling; absent means Gaussian.
    pub dof: Option<f64>,
    /// False for target-free (`eta = 0`) data.
    pub target_present: bool,
}

/// Point at `range` metres along `bearing_deg`.
pub fn polar_point(bearing_deg: f64, range: f64) -> [f64; 2] {
    let (s, c) = bearing_deg.to_radians().sin_cos();
    [range * s, range * c]
}

impl Scenario {
    /// Straight run from -50 deg at 2000 m to 50 deg at 300 m at 2.5 m/s.
    pub fn reference() -> Self {
        let waypoints = vec![polar_point(-50.0, 2000.0), polar_point(50.0, 300.0)];
        let speed = 2.5;
        let duration = path_length(&waypoints) / speed;
        Self {
            waypoints,
            speed,
            duration,
            batch_len: 64,
            range_to_snr: RangeToSnr::default(),
            dof: Some(12.0),
            target_present: true,
        }
    }

    /// The reference path traversed in `duration` seconds.
    pub fn compressed(duration: f64) -> Self {
        Self::reference().traversed_in(duration)
    }

    /// Same path, speed chosen so that it is covered in `duration` seconds.
    pub fn traversed_in(mut self, duration: f64) -> Self {
        self.speed = path_length(&self.waypoints) / duration;
        self.duration = duration;
        self
    }

    pub fn target_free(mut self) -> Self {
        self.target_present = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return Err(Error::InvalidParameter("scenario has no waypoints".into()));
        }
        if self.waypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite waypoint".into()));
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::InvalidParameter(format!("speed {} must be positive", self.speed)));
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidParameter(format!("duration {}", self.duration)));
        }
        if self.batch_len == 0 || self.batch_len % 2 == 1 {
            return Err(Error::UnsupportedBatchLength(self.batch_len));
        }
        if let Some(nu) = self.dof {
            if !(nu > 2.0) {
                return Err(Error::InvalidParameter(format!("dof {nu} must exceed 2")));
            }
        }
        if !(self.range_to_snr.reference_range > 0.0) {
            return Err(Error::InvalidParameter("reference range must be positive".into()));
        }
        Ok(())
    }

    /// Target position after `t` seconds.
    pub fn position(&self, t: f64) -> [f64; 2] {
        let mut left = self.speed * t.max(0.0);
        for w in self.waypoints.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            if left <= d && d > 0.0 {
                let f = left / d;
                return [w[0][0] + f * (w[1][0] - w[0][0]), w[0][1] + f * (w[1][1] - w[0][1])];
            }
            left -= d;
        }
        *self.waypoints.last().unwrap()
    }

    pub fn batch_count(&self, sample_rate: f64) -> usize {
        (self.duration * sample_rate / self.batch_len as f64 + 1e-9).floor() as usize
    }
}

fn path_length(w: &[[f64; 2]]) -> f64 {
    w.windows(2)
        .map(|p| ((p[1][0] - p[0][0]).powi(2) + (p[1][1] - p[0][1]).powi(2)).sqrt())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub batch_index: usize,
    pub psi_deg: f64,
    /// `-inf` when no target is present.
    #[serde(rename = "eta_dB")]
    pub eta_db: f64,
    pub range_m: f64,
}

impl TruthRow {
    pub fn snr(&self) -> f64 {
        10f64.powf(self.eta_db / 10.0)
    }

    pub fn target_present(&self) -> bool {
        self.eta_db > f64::NEG_INFINITY
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScenarioTruth {
    pub rows: Vec<TruthRow>,
}

impl ScenarioTruth {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r).map_err(|e| Error::format("truth csv", e.to_string()))?;
        }
        out.flush().map_err(|e| Error::format("truth csv", e.to_string()))?;
        Ok(())
    }

    /// Parses rows with header `batch_index,psi_deg,eta_dB,range_m`; batch
    /// indices must be consecutive from zero.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, rec) in csv::Reader::from_reader(r).deserialize::<TruthRow>().enumerate() {
            let row = rec.map_err(|e| Error::format("truth csv", e.to_string()))?;
            if row.batch_index != i {
                return Err(Error::format(
                    "truth csv",
                    format!("row {i} has batch index {}", row.batch_index),
                ));
            }
            if row.psi_deg.is_nan() || row.eta_db.is_nan() || row.range_m.is_nan() {
                return Err(Error::format("truth csv", format!("NaN in row {i}")));
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }
}

/// Bearing (degrees from broadside) of a point relative to the array centre.
///
/// A linear array cannot tell front from back, so points behind it map to
/// their mirror image.
pub fn bearing_of(p: [f64; 2]) -> Result<f64> {
    if p[0].hypot(p[1]) < 1e-9 {
        return Err(Error::UndefinedBearing(format!("target at the array centre ({}, {})", p[0], p[1])));
    }
    Ok(p[0].atan2(p[1].abs()).to_degrees())
}

pub fn truth_from_path(scenario: &Scenario, sample_rate: f64) -> Result<ScenarioTruth> {
    scenario.validate()?;
    let period = scenario.batch_len as f64 / sample_rate;
    let rows = (0..scenario.batch_count(sample_rate))
        .map(|k| {
            let p = scenario.position((k as f64 + 0.5) * period);
            let range = p[0].hypot(p[1]);
            Ok(TruthRow {
                batch_index: k,
                psi_deg: bearing_of(p)?,
                eta_db: if scenario.target_present {
                    scenario.range_to_snr.snr_db(range)
                } else {
                    f64::NEG_INFINITY
                },
                range_m: range,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ScenarioTruth { rows })
}

/// Batch-by-batch generator over one continuous noise stream.
pub struct BatchGenerator<'a> {
    geom: &'a ArrayGeometry,
    noise: VarSimulator<'a>,
    noise_power: f64,
    dof: Option<f64>,
    batch_len: usize,
    produced: usize,
}

impl<'a> BatchGenerator<'a> {
    pub fn new<R: Rng + ?Sized>(
        geom: &'a ArrayGeometry,
        model: &'a VarModel,
        dof: Option<f64>,
        batch_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if model.channels() != geom.elements() {
            return Err(Error::DimensionMismatch(format!(
                "noise model has {} channels, array has {}",
                model.channels(),
                geom.elements()
            )));
        }
        if batch_len == 0 || batch_len % 2 == 1 {
            return Err(Error::UnsupportedBatchLength(batch_len));
        }
        Ok(Self {
            geom,
            noise_power: model.noise_power()?,
            noise: VarSimulator::new(model, rng)?,
            dof,
            batch_len,
            produced: 0,
        })
    }

    pub fn noise_power(&self) -> f64 {
        self.noise_power
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, bearing_deg: f64, snr: f64, rng: &mut R) -> Result<SampleBatch> {
        let n = self.batch_len;
        let noise = self.noise.next_block(n, rng);
        // Always drawn so that the noise stream does not depend on the SNR.
        let source = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut data = noise;
        if snr > 0.0 {
            let sigma = (snr * self.noise_power).sqrt();
            let op = SteeringOperator::new(self.geom, bearing_deg, n)?;
            let s = op.apply((source * sigma).as_slice())?;
            data += s;
        }
        if let Some(nu) = self.dof {
            let c: f64 = ChiSquared::new(nu)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?
                .sample(rng);
            data *= (nu / c).sqrt();
        }
        let batch = SampleBatch::new(data, self.produced)?;
        self.produced += 1;
        Ok(batch)
    }
}

/// All batches of a scenario with their truth.
pub fn generate_dataset<R: Rng + ?Sized>(
    scenario: &Scenario,
    geom: &ArrayGeometry,
    model: &VarModel,
    rng: &mut R,
) -> Result<(Vec<SampleBatch>, ScenarioTruth)> {
    let truth = truth_from_path(scenario, geom.sample_rate())?;
    let mut gen = BatchGenerator::new(geom, model, scenario.dof, scenario.batch_len, rng)?;
    let batches = truth
        .rows
        .iter()
        .map(|row| {
            let snr = if row.target_present() { row.snr() } else { 0.0 };
            gen.next_batch(row.psi_deg, snr, rng)
        })
        .collect::<Result<_>>()?;
    Ok((batches, truth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMetadata {
    pub format_version: u32,
    pub sample_rate: f64,
    pub channels: usize,
    pub batch_len: usize,
    /// Rows in the sample file.
    pub samples: usize,
    pub geometry: ArrayGeometry,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub scenario: Option<Scenario>,
}

impl DatasetMetadata {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let meta: Self = toml::from_str(s).map_err(|e| Error::format("dataset metadata", e.to_string()))?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("dataset metadata", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                "dataset metadata",
                format!("unsupported format version {}", self.format_version),
            ));
        }
        self.geometry.validate()?;
        if self.geometry.elements() != self.channels {
            return Err(Error::DimensionMismatch(format!(
                "metadata lists {} channels, geometry has {}",
                self.channels,
                self.geometry.elements()
            )));
        }
        if self.sample_rate != self.geometry.sample_rate() {
            return Err(Error::format(
                "dataset metadata",
                "sample rate differs from the geometry's".to_string(),
            ));
        }
        if self.batch_len == 0 || self.batch_len % 2 == 1 {
            return Err(Error::UnsupportedBatchLength(self.batch_len));
        }
        if let Some(s) = &self.scenario {
            s.validate()?;
        }
        Ok(())
    }
}

/// Decodes row-major little-endian `f32` samples into a `T x channels` matrix.
pub fn decode_samples(bytes: &[u8], channels: usize) -> Result<DMatrix<f64>> {
    if channels == 0 {
        return Err(Error::format("sample file", "zero channels".to_string()));
    }
    let row_bytes = 4 * channels;
    if bytes.len() % row_bytes != 0 {
        return Err(Error::format(
            "sample file",
            format!("{} bytes is not a whole number of {channels}-channel rows", bytes.len()),
        ));
    }
    let rows = bytes.len() / row_bytes;
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let m = DMatrix::from_row_iterator(rows, channels, &mut values);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("sample file", "non-finite sample".to_string()));
    }
    Ok(m)
}

pub fn encode_samples(data: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * data.len());
    for r in 0..data.nrows() {
        for c in 0..data.ncols() {
            out.extend_from_slice(&(data[(r, c)] as f32).to_le_bytes());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub metadata: DatasetMetadata,
    /// `T x M`.
    pub samples: DMatrix<f64>,
    pub truth: Option<ScenarioTruth>,
}

impl Dataset {
    pub fn from_batches(
        geometry: &ArrayGeometry,
        batches: &[SampleBatch],
        truth: Option<ScenarioTruth>,
        seed: Option<u64>,
        scenario: Option<Scenario>,
    ) -> Result<Self> {
        let m = geometry.elements();
        let n = batches.first().map_or(scenario.as_ref().map_or(64, |s| s.batch_len), |b| b.samples());
        let mut samples = DMatrix::zeros(n * batches.len(), m);
        for (k, b) in batches.iter().enumerate() {
            if b.samples() != n || b.channels() != m {
                return Err(Error::DimensionMismatch(format!("batch {k} has a different shape")));
            }
            samples.view_mut((k * n, 0), (n, m)).copy_from(b.data());
        }
        let metadata = DatasetMetadata {
            format_version: DATASET_FORMAT_VERSION,
            sample_rate: geometry.sample_rate(),
            channels: m,
            batch_len: n,
            samples: samples.nrows(),
            geometry: geometry.clone(),
            seed,
            scenario,
        };
        metadata.validate()?;
        Ok(Self {
            metadata,
            samples,
            truth,
        })
    }

    /// Consecutive whole batches; a trailing partial batch is dropped.
    pub fn batches(&self) -> Result<Vec<SampleBatch>> {
        split_batches(&self.samples, self.metadata.batch_len)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = dir.join(METADATA_FILE);
        fs::write(&meta, self.metadata.to_toml_string()?).map_err(|e| Error::io(&meta, e))?;
        let samples = dir.join(SAMPLES_FILE);
        fs::write(&samples, encode_samples(&self.samples)).map_err(|e| Error::io(&samples, e))?;
        if let Some(t) = &self.truth {
            let path = dir.join(TRUTH_FILE);
            let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            t.write_csv(std::io::BufWriter::new(f))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(METADATA_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let metadata = DatasetMetadata::from_toml_str(&text)?;
        let sample_path = dir.join(SAMPLES_FILE);
        let bytes = fs::read(&sample_path).map_err(|e| Error::io(&sample_path, e))?;
        let samples = decode_samples(&bytes, metadata.channels)?;
        if samples.nrows() != metadata.samples {
            return Err(Error::format(
                "sample file",
                format!("{} rows, metadata says {}", samples.nrows(), metadata.samples),
            ));
        }
        let truth_path = dir.join(TRUTH_FILE);
        let truth = if truth_path.exists() {
            let f = fs::File::open(&truth_path).map_err(|e| Error::io(&truth_path, e))?;
            Some(ScenarioTruth::read_csv(std::io::BufReader::new(f))?)
        } else {
            None
        };
        Ok(Self {
            metadata,
            samples,
            truth,
        })
    }
}

pub fn split_batches(samples: &DMatrix<f64>, batch_len: usize) -> Result<Vec<SampleBatch>> {
    (0..samples.nrows() / batch_len)
        .map(|k| {
            SampleBatch::new(
                samples.rows(k * batch_len, batch_len).into_owned(),
                k,
            )
        })
        .collect()
}
