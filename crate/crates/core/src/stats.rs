//! Measurement likelihood ratios for whitened sample batches.
//!
//! Under the target hypothesis a whitened batch `z` (length `NM`) is
//! multivariate-t with covariance structure `eta H H^T + I`; under the null
//! it is `I`. Through the beamformer the log ratio needs only `||z||^2` and
//! `B(psi, z)`:
//!
//! ```text
//! ln L = -(N/2) ln(M eta + 1) - ((nu + NM)/2) ln(1 - c B),
//! c    = eta / ((nu + ||z||^2)(1 + M eta))
//! ```

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TModelParams {
    dof: f64,
    samples: usize,
    channels: usize,
}

impl TModelParams {
    pub fn new(dof: f64, samples: usize, channels: usize) -> Result<Self> {
        if !(dof > 2.0) {
            return Err(Error::InvalidParameter(format!(
                "degrees of freedom {dof} must exceed 2"
            )));
        }
        if samples == 0 || channels == 0 {
            return Err(Error::InvalidParameter("empty batch shape".into()));
        }
        Ok(Self {
            dof,
            samples,
            channels,
        })
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// Sufficient statistics of one whitened batch at one hypothesised state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodInputs {
    /// `||z||^2`
    pub energy: f64,
    /// `B(psi, z)`
    pub beam_energy: f64,
    /// Linear SNR.
    pub snr: f64,
}

/// Multivariate-t log-likelihood ratio.
pub fn t_log_lr(inp: &LikelihoodInputs, params: &TModelParams) -> Result<f64> {
    let n = params.samples as f64;
    let m = params.channels as f64;
    let nu = params.dof;
    let eta = inp.snr;
    if !(eta >= 0.0) {
        return Err(Error::InvalidParameter(format!("SNR {eta} must be non-negative")));
    }
    if eta == 0.0 {
        return Ok(0.0);
    }
    let c = eta / ((nu + inp.energy) * (1.0 + m * eta));
    let cb = c * inp.beam_energy;
    if !(cb < 1.0) {
        return Err(Error::NumericalDomain(format!(
            "c*B = {cb} >= 1 (beam energy {} exceeds the array bound for energy {})",
            inp.beam_energy, inp.energy
        )));
    }
    Ok(-0.5 * n * (m * eta).ln_1p() - 0.5 * (nu + n * m) * (-cb).ln_1p())
}

/// Gaussian (`nu -> inf`) limit of [`t_log_lr`].
pub fn gauss_log_lr(inp: &LikelihoodInputs, samples: usize, channels: usize) -> f64 {
    let n = samples as f64;
    let m = channels as f64;
    let eta = inp.snr;
    -0.5 * n * (m * eta).ln_1p() + eta * inp.beam_energy / (2.0 * (1.0 + m * eta))
}

/// Exact multivariate-t log density with zero location and scale matrix `S`.
///
/// This is the expensive reference evaluation (Cholesky of the full
/// `NM x NM` scale); the tracker never calls it.
pub fn t_logpdf_full(z: &DVector<f64>, dof: f64, scale: &DMatrix<f64>) -> Result<f64> {
    let d = z.len();
    if scale.nrows() != d || scale.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "scale is {}x{}, point has {d} entries",
            scale.nrows(),
            scale.ncols()
        )));
    }
    if !(dof > 0.0) {
        return Err(Error::InvalidParameter(format!("dof {dof} must be positive")));
    }
    let chol = scale
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("t scale matrix".into()))?;
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let half = chol
        .l()
        .solve_lower_triangular(z)
        .ok_or_else(|| Error::NotPositiveDefinite("t scale matrix".into()))?;
    let maha = half.norm_squared();
    let df = d as f64;
    Ok(ln_gamma((dof + df) / 2.0)
        - ln_gamma(dof / 2.0)
        - 0.5 * df * (dof * std::f64::consts::PI).ln()
        - 0.5 * log_det
        - 0.5 * (dof + df) * (maha / dof).ln_1p())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn params() -> TModelParams {
        TModelParams::new(5.0, 8, 3).unwrap()
    }

    #[test]
    fn rejects_bad_params() {
        assert!(TModelParams::new(2.0, 8, 3).is_err());
        assert!(TModelParams::new(5.0, 0, 3).is_err());
    }

    #[test]
    fn zero_snr_is_neutral() {
        let inp = LikelihoodInputs {
            energy: 31.0,
            beam_energy: 60.0,
            snr: 0.0,
        };
        assert_eq!(t_log_lr(&inp, &params()).unwrap(), 0.0);
        assert_eq!(gauss_log_lr(&inp, 8, 3), 0.0);
    }

    #[test]
    fn zero_beam_energy_keeps_only_the_volume_term() {
        let inp = LikelihoodInputs {
            energy: 20.0,
            beam_energy: 0.0,
            snr: 0.7,
        };
        let expected = -4.0 * (3.0f64 * 0.7 + 1.0).ln();
        assert_abs_diff_eq!(t_log_lr(&inp, &params()).unwrap(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(gauss_log_lr(&inp, 8, 3), expected, epsilon = 1e-15);
    }

    #[test]
    fn domain_violation_is_an_error() {
        let inp = LikelihoodInputs {
            energy: 1.0,
            beam_energy: 1e6,
            snr: 10.0,
        };
        assert!(matches!(
            t_log_lr(&inp, &params()),
            Err(Error::NumericalDomain(_))
        ));
    }

    #[test]
    fn small_snr_keeps_precision() {
        // c B ~ 1e-14: a naive ln(1 - cB) would round to zero.
        let inp = LikelihoodInputs {
            energy: 24.0,
            beam_energy: 50.0,
            snr: 1e-15,
        };
        let v = t_log_lr(&inp, &params()).unwrap();
        let g = gauss_log_lr(&inp, 8, 3);
        assert!(v != 0.0);
        assert!((v - g).abs() < 1e-3 * g.abs());
    }

    #[test]
    fn standard_t_normalizer() {
        // ln t_d(0; nu, 0, I) at d = 4, nu = 5, independently evaluated with
        // mpmath at 30 digits: lgamma(4.5) - lgamma(2.5) - 2 ln(5 pi).
        let z = DVector::zeros(4);
        let v = t_logpdf_full(&z, 5.0, &DMatrix::identity(4, 4)).unwrap();
        assert_abs_diff_eq!(v, -3.339_281_896_197_478, epsilon = 1e-12);
    }

    #[test]
    fn mahalanobis_invariance() {
        let z = DVector::from_vec(vec![0.3, -1.2, 0.8]);
        let s = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 0.5]);
        let k = 3.0;
        // Joint scaling only shifts the density by -d ln k (the Jacobian).
        let a = t_logpdf_full(&z, 4.0, &s).unwrap();
        let b = t_logpdf_full(&(&z * k), 4.0, &(&s * (k * k))).unwrap();
        assert_abs_diff_eq!(a - b, 3.0 * k.ln(), epsilon = 1e-12);
    }

    #[test]
    fn gaussian_limit_of_full_density() {
        let z = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.1]);
        let v = t_logpdf_full(&z, 1e8, &DMatrix::identity(4, 4)).unwrap();
        let gauss = -0.5 * z.norm_squared() - 2.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((v - gauss).abs() < 4.0 * 1e-4);
    }

    #[test]
    fn non_pd_scale_rejected() {
        let z = DVector::zeros(2);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            t_logpdf_full(&z, 3.0, &s),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    proptest! {
        #[test]
        fn t_ratio_increases_with_beam_energy(
            energy in 1.0f64..100.0,
            eta in 0.01f64..5.0,
            frac_a in 0.0f64..1.0,
            frac_b in 0.0f64..1.0,
        ) {
            let p = params();
            let (lo, hi) = if frac_a < frac_b { (frac_a, frac_b) } else { (frac_b, frac_a) };
            prop_assume!(hi - lo > 1e-6);
            let max_b = 3.0 * energy;
            let at = |f: f64| t_log_lr(&LikelihoodInputs { energy, beam_energy: f * max_b, snr: eta }, &p).unwrap();
            prop_assert!(at(hi) > at(lo));
        }
    }
}
