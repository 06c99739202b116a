//! Track logs, OSPA and detection statistics.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, OrderStatistics};

use crate::sim::ScenarioTruth;
use crate::{Error, Result};

/// Consecutive confirmed batches required before a detection is declared.
pub const DEFAULT_SUSTAIN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OspaConfig {
    /// Degrees.
    pub cutoff: f64,
    pub order: f64,
}

impl Default for OspaConfig {
    fn default() -> Self {
        Self {
            cutoff: 30.0,
            order: 1.0,
        }
    }
}

impl OspaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) || !(self.order >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "OSPA cutoff {} / order {}",
                self.cutoff, self.order
            )));
        }
        Ok(())
    }
}

/// OSPA between at most one estimated and at most one true bearing.
pub fn ospa_single(estimates: &[f64], truth: Option<f64>, cfg: &OspaConfig) -> Result<f64> {
    cfg.validate()?;
    if estimates.len() > 1 {
        return Err(Error::Unsupported(format!(
            "{} estimates in single-target OSPA",
            estimates.len()
        )));
    }
    Ok(match (estimates.first(), truth) {
        (None, None) => 0.0,
        (Some(e), Some(t)) => (e - t).abs().min(cfg.cutoff),
        // |X| + |Y| = 1: the cardinality term alone, (rho^f * 1 / 1)^(1/f).
        _ => cfg.cutoff,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub batch_index: usize,
    pub time_s: f64,
    pub q: f64,
    /// NaN when the belief holds no particles.
    pub psi_est_deg: f64,
    pub psidot_est: f64,
    #[serde(rename = "eta_dB_est")]
    pub eta_db_est: f64,
    #[serde(with = "bool_as_int")]
    pub confirmed: bool,
}

mod bool_as_int {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(D::Error::custom(format!("confirmed flag {v} is not 0 or 1"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackLog {
    pub rows: Vec<TrackRow>,
}

impl TrackLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn confirmed(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.confirmed).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r).map_err(|e| Error::format("track log", e.to_string()))?;
        }
        out.flush().map_err(|e| Error::format("track log", e.to_string()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, rec) in csv::Reader::from_reader(r).deserialize::<TrackRow>().enumerate() {
            let row = rec.map_err(|e| Error::format("track log", e.to_string()))?;
            if row.batch_index != i {
                return Err(Error::format(
                    "track log",
                    format!("row {i} has batch index {}", row.batch_index),
                ));
            }
            if !(0.0..=1.0).contains(&row.q) {
                return Err(Error::format("track log", format!("q = {} in row {i}", row.q)));
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }
}

/// First batch that starts a run of at least `sustain` confirmed batches.
pub fn first_sustained(confirmed: &[bool], sustain: usize) -> Option<usize> {
    let sustain = sustain.max(1);
    let mut run = 0;
    for (k, &c) in confirmed.iter().enumerate() {
        run = if c { run + 1 } else { 0 };
        if run == sustain {
            return Some(k + 1 - sustain);
        }
    }
    None
}

/// Changes of confirmation status after batch `from`.
pub fn flip_count(confirmed: &[bool], from: usize) -> usize {
    confirmed
        .windows(2)
        .skip(from)
        .filter(|w| w[0] != w[1])
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub batch_index: usize,
    pub range_m: f64,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub ospa: Vec<f64>,
    pub q: Vec<f64>,
    pub confirmed: Vec<bool>,
    pub detection: Option<Detection>,
    /// Confirmation flips after the first sustained detection.
    pub flips: usize,
}

pub fn evaluate_run(log: &TrackLog, truth: &ScenarioTruth, cfg: &OspaConfig, sustain: usize) -> Result<RunReport> {
    if log.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "track log has {} rows, truth has {}",
            log.len(),
            truth.len()
        )));
    }
    let ospa = log
        .rows
        .iter()
        .zip(&truth.rows)
        .map(|(r, t)| {
            let est: &[f64] = if r.confirmed {
                std::slice::from_ref(&r.psi_est_deg)
            } else {
                &[]
            };
            ospa_single(est, t.target_present().then_some(t.psi_deg), cfg)
        })
        .collect::<Result<_>>()?;
    let confirmed = log.confirmed();
    let detection = detection_stats(&confirmed, truth, sustain);
    let flips = detection.map_or(0, |d| flip_count(&confirmed, d.batch_index));
    Ok(RunReport {
        ospa,
        q: log.rows.iter().map(|r| r.q).collect(),
        confirmed,
        detection,
        flips,
    })
}

/// Range and SNR at the first sustained confirmation.
pub fn detection_stats(confirmed: &[bool], truth: &ScenarioTruth, sustain: usize) -> Option<Detection> {
    let k = first_sustained(confirmed, sustain)?;
    let t = truth.rows.get(k)?;
    Some(Detection {
        batch_index: k,
        range_m: t.range_m,
        snr_db: t.eta_db,
    })
}

/// Per-batch quantiles across runs of equal length.
pub fn quantile_bands(runs: &[Vec<f64>], probs: &[f64]) -> Result<Vec<Vec<f64>>> {
    let len = runs.first().map_or(0, Vec::len);
    if runs.iter().any(|r| r.len() != len) {
        return Err(Error::DimensionMismatch("runs differ in length".into()));
    }
    Ok((0..len)
        .map(|k| {
            let mut data = Data::new(runs.iter().map(|r| r[k]).collect::<Vec<_>>());
            probs.iter().map(|&p| data.quantile(p)).collect()
        })
        .collect())
}

pub fn median(values: &[f64]) -> f64 {
    Data::new(values.to_vec()).median()
}

/// Aggregate quantile CSV: one row per batch.
pub fn write_bands_csv<W: Write>(w: W, reports: &[RunReport], probs: &[f64]) -> Result<()> {
    let q: Vec<Vec<f64>> = reports.iter().map(|r| r.q.clone()).collect();
    let o: Vec<Vec<f64>> = reports.iter().map(|r| r.ospa.clone()).collect();
    let qb = quantile_bands(&q, probs)?;
    let ob = quantile_bands(&o, probs)?;
    let mut out = csv::Writer::from_writer(w);
    let fmt = |e: csv::Error| Error::format("quantile csv", e.to_string());
    let mut header = vec!["batch_index".to_string()];
    for p in probs {
        header.push(format!("q_p{:02}", (p * 100.0).round()));
    }
    for p in probs {
        header.push(format!("ospa_p{:02}", (p * 100.0).round()));
    }
    out.write_record(&header).map_err(fmt)?;
    for (k, (a, b)) in qb.iter().zip(&ob).enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(a.iter().chain(b).map(|v| v.to_string()));
        out.write_record(&rec).map_err(fmt)?;
    }
    out.flush().map_err(|e| Error::format("quantile csv", e.to_string()))?;
    Ok(())
}

/// Per-batch metrics CSV of one run.
pub fn write_run_csv<W: Write>(w: W, report: &RunReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let fmt = |e: csv::Error| Error::format("metrics csv", e.to_string());
    out.write_record(["batch_index", "ospa", "q", "confirmed"]).map_err(fmt)?;
    for (k, ((o, q), c)) in report.ospa.iter().zip(&report.q).zip(&report.confirmed).enumerate() {
        out.write_record([k.to_string(), o.to_string(), q.to_string(), u8::from(*c).to_string()])
            .map_err(fmt)?;
    }
    out.flush().map_err(|e| Error::format("metrics csv", e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TruthRow;
    use proptest::prelude::*;

    fn truth(n: usize) -> ScenarioTruth {
        ScenarioTruth {
            rows: (0..n)
                .map(|k| TruthRow {
                    batch_index: k,
                    psi_deg: -50.0 + k as f64,
                    eta_db: -18.0 + k as f64 * 0.1,
                    range_m: 2000.0 - k as f64 * 10.0,
                })
                .collect(),
        }
    }

    fn log(t: &ScenarioTruth, confirmed: &[bool], offset: f64) -> TrackLog {
        TrackLog {
            rows: t
                .rows
                .iter()
                .zip(confirmed)
                .map(|(r, &c)| TrackRow {
                    batch_index: r.batch_index,
                    time_s: r.batch_index as f64 * 0.17,
                    q: if c { 0.95 } else { 0.1 },
                    psi_est_deg: r.psi_deg + offset,
                    psidot_est: 0.0,
                    eta_db_est: -10.0,
                    confirmed: c,
                })
                .collect(),
        }
    }

    #[test]
    fn ospa_edge_cases() {
        let cfg = OspaConfig::default();
        assert_eq!(ospa_single(&[12.5], Some(12.5), &cfg).unwrap(), 0.0);
        assert_eq!(ospa_single(&[], Some(12.5), &cfg).unwrap(), 30.0);
        assert_eq!(ospa_single(&[57.5], Some(12.5), &cfg).unwrap(), 30.0);
        assert_eq!(ospa_single(&[2.5], None, &cfg).unwrap(), 30.0);
        assert_eq!(ospa_single(&[], None, &cfg).unwrap(), 0.0);
        assert!(ospa_single(&[1.0, 2.0], Some(0.0), &cfg).is_err());
    }

    #[test]
    fn sustain_rule() {
        let c = [false, true, true, true, true, false, true, true, true, true, true, true];
        assert_eq!(first_sustained(&c, 5), Some(6));
        let oscillating: Vec<bool> = (0..40).map(|k| k % 4 != 0).collect();
        assert_eq!(first_sustained(&oscillating, 5), None);
        assert_eq!(first_sustained(&[true; 5], 5), Some(0));
    }

    #[test]
    fn flips_after_detection() {
        let c = [true, false, true, true, true, true, true, false, true, false];
        assert_eq!(flip_count(&c, 2), 3);
        assert_eq!(flip_count(&c, 0), 5);
    }

    #[test]
    fn perfect_and_silent_logs() {
        let t = truth(20);
        let cfg = OspaConfig::default();
        let r = evaluate_run(&log(&t, &[true; 20], 0.0), &t, &cfg, 5).unwrap();
        assert!(r.ospa.iter().all(|&v| v == 0.0));
        let d = r.detection.unwrap();
        assert_eq!((d.batch_index, d.range_m, d.snr_db), (0, 2000.0, -18.0));
        assert_eq!(r.flips, 0);
        let r = evaluate_run(&log(&t, &[false; 20], 0.0), &t, &cfg, 5).unwrap();
        assert!(r.ospa.iter().all(|&v| v == 30.0));
        assert!(r.detection.is_none());
        assert!(evaluate_run(&log(&t, &[false; 19], 0.0), &t, &cfg, 5).is_err());
    }

    #[test]
    fn track_log_round_trip() {
        let t = truth(6);
        let mut l = log(&t, &[false, true, true, false, true, true], 0.5);
        l.rows[0].psi_est_deg = f64::NAN;
        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("batch_index,time_s,q,psi_est_deg,psidot_est,eta_dB_est,confirmed\n"));
        let back = TrackLog::read_csv(&buf[..]).unwrap();
        assert!(back.rows[0].psi_est_deg.is_nan());
        assert_eq!(back.rows[1..], l.rows[1..]);
        let bad = text.replacen(",0\n", ",2\n", 1);
        assert!(TrackLog::read_csv(bad.as_bytes()).is_err());
    }

    #[test]
    fn bands_are_deterministic() {
        let runs = vec![vec![0.0, 1.0], vec![1.0, 3.0], vec![2.0, 5.0]];
        let b = quantile_bands(&runs, &[0.1, 0.5, 0.9]).unwrap();
        assert_eq!(b[0][1], 1.0);
        assert_eq!(b[1][1], 3.0);
        assert!(b[0][0] <= b[0][1] && b[0][1] <= b[0][2]);
        assert_eq!(b, quantile_bands(&runs, &[0.1, 0.5, 0.9]).unwrap());
        assert!(quantile_bands(&[vec![1.0], vec![]], &[0.5]).is_err());
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }

    proptest! {
        #[test]
        fn ospa_bounded_and_monotone(err_a in 0.0f64..200.0, err_b in 0.0f64..200.0, psi in -90.0f64..90.0) {
            let cfg = OspaConfig::default();
            let a = ospa_single(&[psi + err_a], Some(psi), &cfg).unwrap();
            let b = ospa_single(&[psi + err_b], Some(psi), &cfg).unwrap();
            prop_assert!((0.0..=30.0).contains(&a));
            if err_a <= err_b {
                prop_assert!(a <= b);
            }
        }
    }
}
