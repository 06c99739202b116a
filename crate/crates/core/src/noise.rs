//! Vector-autoregressive ambient-noise model.
//!
//! `e_n = A_1 e_{n-1} + ... + A_p e_{n-p} + F w_n`, `F F^T = Sigma_w`,
//! `w_n ~ N(0, I_M)`. Inverting the recursion whitens a sample stream.
//!
//! # Model file layout
//!
//! All integers and floats little-endian:
//!
//! | offset | size        | content                                   |
//! |--------|-------------|-------------------------------------------|
//! | 0      | 4           | magic `b"VARM"`                           |
//! | 4      | 1           | format version, currently `1`             |
//! | 5      | 4           | order `p` (u32)                           |
//! | 9      | 4           | channel count `M` (u32)                   |
//! | 13     | 8·p·M²      | `A_1 .. A_p`, each `M x M` row-major f64  |
//! | ...    | 8·M²        | `Sigma_w`, row-major f64                  |
//!
//! The file length must match exactly.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"VARM";
pub const MODEL_VERSION: u8 = 1;
const HEADER_LEN: usize = 13;
/// Upper bounds accepted by the decoder.
pub const MAX_MODEL_CHANNELS: usize = 1024;
pub const MAX_MODEL_ORDER: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct VarModel {
    coeffs: Vec<DMatrix<f64>>,
    innovation_cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl VarModel {
    /// Builds a model from `A_1..A_p` and `Sigma_w`. `Sigma_w` is symmetrized
    /// and must be strictly positive definite.
    pub fn new(coeffs: Vec<DMatrix<f64>>, innovation_cov: DMatrix<f64>) -> Result<Self> {
        let m = innovation_cov.nrows();
        if m == 0 || innovation_cov.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "innovation covariance is {}x{}",
                innovation_cov.nrows(),
                innovation_cov.ncols()
            )));
        }
        for (i, a) in coeffs.iter().enumerate() {
            if a.nrows() != m || a.ncols() != m {
                return Err(Error::DimensionMismatch(format!(
                    "A_{} is {}x{}, expected {m}x{m}",
                    i + 1,
                    a.nrows(),
                    a.ncols()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("A_{} is not finite", i + 1)));
            }
        }
        if innovation_cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "innovation covariance is not finite".into(),
            ));
        }
        let sym = (&innovation_cov + innovation_cov.transpose()) * 0.5;
        let factor = sym
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?
            .l();
        if factor.diagonal().iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::NotPositiveDefinite("innovation covariance".into()));
        }
        Ok(Self {
            coeffs,
            innovation_cov: sym,
            factor,
        })
    }

    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    pub fn channels(&self) -> usize {
        self.innovation_cov.nrows()
    }

    pub fn coeffs(&self) -> &[DMatrix<f64>] {
        &self.coeffs
    }

    pub fn innovation_cov(&self) -> &DMatrix<f64> {
        &self.innovation_cov
    }

    /// Lower-triangular `F` with `F F^T = Sigma_w`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// `pM x pM` companion matrix of the recursion (empty for `p = 0`).
    pub fn companion(&self) -> DMatrix<f64> {
        let m = self.channels();
        let p = self.order();
        let mut c = DMatrix::zeros(p * m, p * m);
        for (i, a) in self.coeffs.iter().enumerate() {
            c.view_mut((0, i * m), (m, m)).copy_from(a);
        }
        for i in 1..p {
            c.view_mut((i * m, (i - 1) * m), (m, m))
                .copy_from(&DMatrix::identity(m, m));
        }
        c
    }

    pub fn spectral_radius(&self) -> f64 {
        if self.order() == 0 {
            return 0.0;
        }
        let c = self.companion();
        match c.clone().try_schur(1e-13, 20_000) {
            Some(schur) => schur
                .complex_eigenvalues()
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max),
            // Schur iteration can stall on highly repeated eigenvalues;
            // fall back to Gelfand's formula rho = lim ||C^k||^(1/k).
            None => {
                let mut a = c;
                let mut log_scale = 0.0;
                let mut k = 1.0;
                for _ in 0..12 {
                    a = &a * &a;
                    k *= 2.0;
                    let n = a.norm();
                    if n == 0.0 {
                        return 0.0;
                    }
                    a /= n;
                    log_scale = 2.0 * log_scale + n.ln();
                }
                (log_scale / k).exp()
            }
        }
    }

    pub fn is_stable(&self) -> bool {
        self.spectral_radius() < 1.0
    }

    /// Stationary covariance `E[e_n e_n^T]` of a stable model, from the
    /// discrete Lyapunov equation of the companion form (doubling iteration).
    pub fn stationary_covariance(&self) -> Result<DMatrix<f64>> {
        let m = self.channels();
        let p = self.order();
        if p == 0 {
            return Ok(self.innovation_cov.clone());
        }
        let radius = self.spectral_radius();
        if radius >= 1.0 {
            return Err(Error::Unstable(radius));
        }
        let mut a = self.companion();
        let mut g = DMatrix::zeros(p * m, p * m);
        g.view_mut((0, 0), (m, m)).copy_from(&self.innovation_cov);
        for _ in 0..200 {
            let next = &g + &a * &g * a.transpose();
            a = &a * &a;
            let done = a.norm() < 1e-15 * (1.0 + next.norm());
            g = next;
            if done {
                break;
            }
        }
        let block = g.view((0, 0), (m, m)).into_owned();
        Ok((&block + block.transpose()) * 0.5)
    }

    /// `|E[e e^T]|^(1/M)`: geometric-mean noise power per channel.
    pub fn noise_power(&self) -> Result<f64> {
        let cov = self.stationary_covariance()?;
        let m = self.channels() as f64;
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("stationary covariance".into()))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        Ok((log_det / m).exp())
    }

    /// A spatiotemporally correlated ambient-noise model used for simulation.
    ///
    /// Every channel shares a stable scalar AR(`order`) colouring whose poles
    /// sit at low frequencies; the innovations are spatially correlated with
    /// coefficient 0.5^|i-j|.
    pub fn synthetic_ambient(channels: usize, order: usize) -> Result<Self> {
        // Monic polynomial 1 - a_1 z^-1 - ... - a_p z^-p from its roots.
        let mut poly = vec![1.0f64];
        let mut push_root_pair = |r: f64, theta: f64| {
            let quad = [1.0, -2.0 * r * theta.cos(), r * r];
            let mut next = vec![0.0; poly.len() + 2];
            for (i, c) in poly.iter().enumerate() {
                for (j, q) in quad.iter().enumerate() {
                    next[i + j] += c * q;
                }
            }
            poly = next;
        };
        for j in 0..order / 2 {
            let r = 0.3 - 0.03 * j as f64;
            let theta = std::f64::consts::PI * (0.06 + 0.11 * j as f64);
            push_root_pair(r, theta);
        }
        if order % 2 == 1 {
            let mut next = vec![0.0; poly.len() + 1];
            for (i, c) in poly.iter().enumerate() {
                next[i] += c;
                next[i + 1] -= 0.5 * c;
            }
            poly = next;
        }
        let coeffs: Vec<DMatrix<f64>> = (1..=order)
            .map(|i| DMatrix::identity(channels, channels) * (-poly[i]))
            .collect();
        let cov = DMatrix::from_fn(channels, channels, |i, j| {
            0.5f64.powi((i as i32 - j as i32).abs())
        });
        Self::new(coeffs, cov)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.channels();
        let p = self.order();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * (p + 1) * m * m);
        out.extend_from_slice(MODEL_MAGIC);
        out.push(MODEL_VERSION);
        out.extend_from_slice(&(p as u32).to_le_bytes());
        out.extend_from_slice(&(m as u32).to_le_bytes());
        for mat in self.coeffs.iter().chain(std::iter::once(&self.innovation_cov)) {
            for r in 0..m {
                for c in 0..m {
                    out.extend_from_slice(&mat[(r, c)].to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format("model file", "truncated header"));
        }
        if &bytes[..4] != MODEL_MAGIC {
            return Err(Error::format("model file", "bad magic"));
        }
        if bytes[4] != MODEL_VERSION {
            return Err(Error::format(
                "model file",
                format!("unsupported version {}", bytes[4]),
            ));
        }
        let p = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let m = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        if m == 0 || m > MAX_MODEL_CHANNELS || p > MAX_MODEL_ORDER {
            return Err(Error::format(
                "model file",
                format!("unsupported dimensions p={p} M={m}"),
            ));
        }
        let expected = HEADER_LEN + 8 * (p + 1) * m * m;
        if bytes.len() != expected {
            return Err(Error::format(
                "model file",
                format!("length {} does not match p={p} M={m}", bytes.len()),
            ));
        }
        let mut floats = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut read = || DMatrix::from_row_iterator(m, m, floats.by_ref().take(m * m));
        let coeffs: Vec<_> = (0..p).map(|_| read()).collect();
        let cov = read();
        let scale = cov.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if (&cov - cov.transpose()).iter().any(|d| d.abs() > 1e-9 * scale) {
            return Err(Error::format("model file", "Sigma_w is not symmetric"));
        }
        Self::new(coeffs, cov)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Gram matrix of stacked lag vectors `[y_n; y_{n-1}; ...; y_{n-p}]` over
/// rows `n = start..T`.
fn lag_gram(data: &DMatrix<f64>, p: usize, start: usize) -> DMatrix<f64> {
    const CHUNK: usize = 2048;
    let m = data.ncols();
    let dim = (p + 1) * m;
    let mut gram = DMatrix::zeros(dim, dim);
    let mut n = start;
    while n < data.nrows() {
        let rows = CHUNK.min(data.nrows() - n);
        let block = DMatrix::from_fn(rows, dim, |r, c| data[(n + r - c / m, c % m)]);
        gram.gemm_tr(1.0, &block, &block, 1.0);
        n += rows;
    }
    gram
}

/// Solves the normal equations `XtX B = XtY`, adding `1e-10 trace(XtX) I`
/// only if the plain factorization fails.
fn solve_normal(xtx: DMatrix<f64>, xty: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = xtx.clone().cholesky() {
        let sol = ch.solve(xty);
        if sol.iter().all(|v| v.is_finite()) {
            return Ok(sol);
        }
    }
    let lambda = 1e-10 * xtx.trace();
    if !(lambda > 0.0) {
        return Err(Error::SingularFit("regressor matrix is zero".into()));
    }
    let n = xtx.nrows();
    let reg = xtx + DMatrix::identity(n, n) * lambda;
    let ch = reg
        .cholesky()
        .ok_or_else(|| Error::SingularFit("regularized normal equations".into()))?;
    Ok(ch.solve(xty))
}

fn split_coeffs(b_t: &DMatrix<f64>, p: usize, m: usize) -> Vec<DMatrix<f64>> {
    // b_t is pM x M with y_n^T ~= x_n^T b_t, so A_i = b_t[(i-1)M.., :]^T.
    (0..p)
        .map(|i| b_t.view((i * m, 0), (m, m)).transpose())
        .collect()
}

/// Least-squares VAR(`p`) fit on a `T x M` sample matrix.
///
/// `Sigma_w` is estimated as `sum eps eps^T / (T - p - 1)` over the
/// `T - p` residuals.
pub fn fit_var(data: &DMatrix<f64>, p: usize) -> Result<VarModel> {
    let t = data.nrows();
    let m = data.ncols();
    if m == 0 {
        return Err(Error::InsufficientData("no channels".into()));
    }
    if p > MAX_MODEL_ORDER {
        return Err(Error::InvalidOrder(format!("order {p} exceeds {MAX_MODEL_ORDER}")));
    }
    if t <= p * m + p + 1 {
        return Err(Error::InsufficientData(format!(
            "{t} samples cannot fit a VAR({p}) on {m} channels (need more than {})",
            p * m + p + 1
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("data contains non-finite samples".into()));
    }
    let coeffs = if p == 0 {
        Vec::new()
    } else {
        let gram = lag_gram(data, p, p);
        let xtx = gram.view((m, m), (p * m, p * m)).into_owned();
        let xty = gram.view((m, 0), (p * m, m)).into_owned();
        split_coeffs(&solve_normal(xtx, &xty)?, p, m)
    };
    let mut s = DMatrix::zeros(m, m);
    let mut eps = DVector::zeros(m);
    for n in p..t {
        eps.copy_from(&data.row(n).transpose());
        for (i, a) in coeffs.iter().enumerate() {
            eps.gemv(-1.0, a, &data.row(n - i - 1).transpose(), 1.0);
        }
        s.ger(1.0, &eps, &eps, 1.0);
    }
    let cov = s / (t - p - 1) as f64;
    VarModel::new(coeffs, cov).map_err(|e| match e {
        Error::NotPositiveDefinite(_) => {
            Error::SingularFit("residual covariance is not positive definite".into())
        }
        other => other,
    })
}

/// Akaike order selection over `0..=p_max`.
///
/// Every candidate is fitted on the same rows `n = p_max..T`, so that the
/// criteria `T_eff ln det Sigma_w(p) + 2 p M^2` are comparable.
pub fn select_order(data: &DMatrix<f64>, p_max: usize) -> Result<usize> {
    Ok(order_criteria(data, p_max)?
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(p, _)| p)
        .unwrap_or(0))
}

/// AIC value of every order `0..=p_max`; see [`select_order`].
pub fn order_criteria(data: &DMatrix<f64>, p_max: usize) -> Result<Vec<f64>> {
    let t = data.nrows();
    let m = data.ncols();
    if p_max > MAX_MODEL_ORDER {
        return Err(Error::InvalidOrder(format!("order {p_max} exceeds {MAX_MODEL_ORDER}")));
    }
    if m == 0 || t <= p_max * m + p_max + 1 {
        return Err(Error::InsufficientData(format!(
            "{t} samples cannot compare orders up to {p_max} on {m} channels"
        )));
    }
    let gram = lag_gram(data, p_max, p_max);
    let t_eff = (t - p_max) as f64;
    let yty = gram.view((0, 0), (m, m)).into_owned();
    let mut out = Vec::with_capacity(p_max + 1);
    for p in 0..=p_max {
        let s = if p == 0 {
            yty.clone()
        } else {
            let xtx = gram.view((m, m), (p * m, p * m)).into_owned();
            let xty = gram.view((m, 0), (p * m, m)).into_owned();
            let b_t = solve_normal(xtx, &xty)?;
            &yty - xty.transpose() * b_t
        };
        let cov = (&s + s.transpose()) * (0.5 / (t_eff - 1.0));
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::SingularFit(format!("residual covariance at order {p}")))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        out.push(t_eff * log_det + 2.0 * (p * m * m) as f64);
    }
    Ok(out)
}

/// History of the last `p` inputs for streaming whitening.
#[derive(Debug, Clone)]
pub struct WhitenState {
    /// Most recent first.
    history: std::collections::VecDeque<DVector<f64>>,
    order: usize,
    seen: usize,
}

impl WhitenState {
    pub fn new(model: &VarModel) -> Self {
        Self {
            history: std::collections::VecDeque::with_capacity(model.order()),
            order: model.order(),
            seen: 0,
        }
    }

    /// Number of upcoming outputs that will still be flagged as warm-up.
    pub fn warm_up_remaining(&self) -> usize {
        self.order.saturating_sub(self.seen)
    }

    pub fn samples_seen(&self) -> usize {
        self.seen
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Whitened {
    pub sample: DVector<f64>,
    /// True while fewer than `p` earlier samples were available.
    pub warm_up: bool,
}

/// `w_n = F^{-1}(y_n - sum_i A_i y_{n-i})`; missing history counts as zero.
pub fn whiten(model: &VarModel, state: &mut WhitenState, y: &[f64]) -> Result<Whitened> {
    let m = model.channels();
    if y.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "sample has {} channels, model has {m}",
            y.len()
        )));
    }
    let input = DVector::from_column_slice(y);
    let mut r = input.clone();
    for (a, past) in model.coeffs.iter().zip(state.history.iter()) {
        r.gemv(-1.0, a, past, 1.0);
    }
    let sample = model
        .factor
        .solve_lower_triangular(&r)
        .ok_or_else(|| Error::NotPositiveDefinite("innovation factor".into()))?;
    let warm_up = state.seen < state.order;
    if state.order > 0 {
        if state.history.len() == state.order {
            state.history.pop_back();
        }
        state.history.push_front(input);
    }
    state.seen += 1;
    Ok(Whitened { sample, warm_up })
}

/// Whitens every row of a `T x M` block; returns the output and the number
/// of leading warm-up rows it contains.
pub fn whiten_block(
    model: &VarModel,
    state: &mut WhitenState,
    data: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, usize)> {
    let mut out = DMatrix::zeros(data.nrows(), data.ncols());
    let mut warm = 0;
    let mut row = vec![0.0; data.ncols()];
    for n in 0..data.nrows() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = data[(n, c)];
        }
        let w = whiten(model, state, &row)?;
        if w.warm_up {
            warm += 1;
        }
        out.set_row(n, &w.sample.transpose());
    }
    Ok((out, warm))
}

/// Streaming generator for a stable VAR process.
#[derive(Debug, Clone)]
pub struct VarSimulator<'a> {
    model: &'a VarModel,
    history: std::collections::VecDeque<DVector<f64>>,
}

impl<'a> VarSimulator<'a> {
    /// Starts from zero history and discards `max(10p, 1000)` samples.
    pub fn new<R: Rng + ?Sized>(model: &'a VarModel, rng: &mut R) -> Result<Self> {
        let radius = model.spectral_radius();
        if radius >= 1.0 {
            return Err(Error::Unstable(radius));
        }
        let p = model.order();
        let mut sim = Self {
            model,
            history: (0..p).map(|_| DVector::zeros(model.channels())).collect(),
        };
        for _ in 0..(10 * p).max(1000) {
            sim.next_sample(rng);
        }
        Ok(sim)
    }

    pub fn next_sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> DVector<f64> {
        let m = self.model.channels();
        let w = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut e = &self.model.factor * w;
        for (a, past) in self.model.coeffs.iter().zip(self.history.iter()) {
            e.gemv(1.0, a, past, 1.0);
        }
        if self.model.order() > 0 {
            self.history.pop_back();
            self.history.push_front(e.clone());
        }
        e
    }

    /// Next `rows` samples as a `rows x M` matrix.
    pub fn next_block<R: Rng + ?Sized>(&mut self, rows: usize, rng: &mut R) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rows, self.model.channels());
        for r in 0..rows {
            let e = self.next_sample(rng);
            out.set_row(r, &e.transpose());
        }
        out
    }
}

/// `T x M` samples from a stable model, after burn-in.
pub fn simulate_var<R: Rng + ?Sized>(
    model: &VarModel,
    samples: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let mut sim = VarSimulator::new(model, rng)?;
    Ok(sim.next_block(samples, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_ar1(a: f64) -> VarModel {
        VarModel::new(vec![DMatrix::from_element(1, 1, a)], DMatrix::identity(1, 1)).unwrap()
    }

    fn var2_m2() -> VarModel {
        let a1 = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3]);
        let a2 = DMatrix::from_row_slice(2, 2, &[-0.2, 0.0, 0.1, 0.15]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        VarModel::new(vec![a1, a2], cov).unwrap()
    }

    fn sample_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
        x.transpose() * x / x.nrows() as f64
    }

    #[test]
    fn order_zero_fit_is_sample_covariance() {
        let data = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 2.0, 0.5, 0.5, 2.0, -1.0]);
        let model = fit_var(&data, 0).unwrap();
        assert_eq!(model.order(), 0);
        let expected = data.transpose() * &data / 3.0;
        assert_abs_diff_eq!(*model.innovation_cov(), expected, epsilon = 1e-14);
    }

    #[test]
    fn fit_recovers_scalar_ar1() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = simulate_var(&scalar_ar1(0.5), 100_000, &mut rng).unwrap();
        let fit = fit_var(&data, 1).unwrap();
        let a = fit.coeffs()[0][(0, 0)];
        assert!((0.48..=0.52).contains(&a), "a = {a}");
        assert_abs_diff_eq!(fit.innovation_cov()[(0, 0)], 1.0, epsilon = 0.02);
    }

    #[test]
    fn fit_on_white_noise_has_small_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let white = VarModel::new(vec![], DMatrix::identity(2, 2)).unwrap();
        let data = simulate_var(&white, 100_000, &mut rng).unwrap();
        let fit = fit_var(&data, 2).unwrap();
        for a in fit.coeffs() {
            assert!(a.iter().all(|v| v.abs() < 0.02), "{a}");
        }
    }

    #[test]
    fn fit_errors() {
        let zeros = DMatrix::zeros(100, 2);
        assert!(matches!(fit_var(&zeros, 2), Err(Error::SingularFit(_))));
        let short = DMatrix::from_element(5, 2, 1.0);
        assert!(matches!(fit_var(&short, 2), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn fit_error_shrinks_with_more_data() {
        let truth = var2_m2();
        let err = |t: usize, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = simulate_var(&truth, t, &mut rng).unwrap();
            let fit = fit_var(&data, 2).unwrap();
            fit.coeffs()
                .iter()
                .zip(truth.coeffs())
                .map(|(a, b)| (a - b).norm())
                .sum::<f64>()
        };
        let small: f64 = (0..4).map(|s| err(2_000, s)).sum();
        let large: f64 = (0..4).map(|s| err(50_000, 100 + s)).sum();
        assert!(large < small, "{large} >= {small}");
    }

    #[test]
    fn order_selection() {
        let mut votes = 0;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
            let white = VarModel::new(vec![], DMatrix::identity(2, 2)).unwrap();
            let data = simulate_var(&white, 5_000, &mut rng).unwrap();
            if select_order(&data, 4).unwrap() == 0 {
                votes += 1;
            }
        }
        assert!(votes >= 3, "white data chose p=0 only {votes}/5 times");

        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let data = simulate_var(&var2_m2(), 20_000, &mut rng).unwrap();
        assert_eq!(select_order(&data, 6).unwrap(), 2);
        assert_eq!(select_order(&data, 0).unwrap(), 0);
    }

    #[test]
    fn identity_whitener_passes_through() {
        let model = VarModel::new(vec![], DMatrix::identity(3, 3)).unwrap();
        let mut st = WhitenState::new(&model);
        let w = whiten(&model, &mut st, &[1.0, -2.0, 3.5]).unwrap();
        assert_eq!(w.sample.as_slice(), &[1.0, -2.0, 3.5]);
        assert!(!w.warm_up);
    }

    #[test]
    fn scalar_whitener_scales() {
        let model = VarModel::new(vec![], DMatrix::from_element(1, 1, 4.0)).unwrap();
        let mut st = WhitenState::new(&model);
        assert_eq!(whiten(&model, &mut st, &[6.0]).unwrap().sample[0], 3.0);
        assert!(whiten(&model, &mut st, &[6.0, 1.0]).is_err());
    }

    #[test]
    fn warm_up_is_flagged() {
        let model = var2_m2();
        let mut st = WhitenState::new(&model);
        let flags: Vec<bool> = (0..4)
            .map(|_| whiten(&model, &mut st, &[1.0, 1.0]).unwrap().warm_up)
            .collect();
        assert_eq!(flags, vec![true, true, false, false]);
    }

    #[test]
    fn whitening_round_trip_statistics() {
        let model = var2_m2();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let data = simulate_var(&model, 100_000, &mut rng).unwrap();
        let mut st = WhitenState::new(&model);
        let (w, warm) = whiten_block(&model, &mut st, &data).unwrap();
        assert_eq!(warm, 2);
        let w = w.rows(warm, w.nrows() - warm).into_owned();
        let cov = sample_cov(&w);
        for i in 0..2 {
            for j in 0..2 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((cov[(i, j)] - target).abs() < 0.05, "{cov}");
            }
        }
        let n = w.nrows();
        let lag1 = w.rows(1, n - 1).transpose() * w.rows(0, n - 1) / (n - 1) as f64;
        assert!(lag1.iter().all(|v| v.abs() < 0.02), "{lag1}");
    }

    #[test]
    fn white_simulation_has_unit_covariance() {
        let model = VarModel::new(vec![], DMatrix::identity(2, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cov = sample_cov(&simulate_var(&model, 100_000, &mut rng).unwrap());
        assert_abs_diff_eq!(cov, DMatrix::identity(2, 2), epsilon = 0.05);
    }

    #[test]
    fn ar1_autocorrelation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = simulate_var(&scalar_ar1(0.9), 100_000, &mut rng).unwrap();
        let n = x.nrows();
        let mean = x.mean();
        let c0: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let c1: f64 = (1..n).map(|t| (x[t] - mean) * (x[t - 1] - mean)).sum();
        assert_abs_diff_eq!(c1 / c0, 0.9, epsilon = 0.02);
    }

    #[test]
    fn unstable_model_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        assert!(matches!(
            simulate_var(&scalar_ar1(1.01), 10, &mut rng),
            Err(Error::Unstable(_))
        ));
        assert!(scalar_ar1(1.01).stationary_covariance().is_err());
    }

    #[test]
    fn stationary_covariance_of_ar1() {
        let model = scalar_ar1(0.9);
        let var = model.stationary_covariance().unwrap()[(0, 0)];
        assert_abs_diff_eq!(var, 1.0 / (1.0 - 0.81), epsilon = 1e-10);
        assert_abs_diff_eq!(model.noise_power().unwrap(), var, epsilon = 1e-10);
    }

    #[test]
    fn stationary_covariance_matches_lyapunov_fixed_point() {
        let model = VarModel::synthetic_ambient(4, 6).unwrap();
        let p = model.order();
        let m = model.channels();
        // Full companion-state covariance by brute-force summation.
        let c = model.companion();
        let mut q = DMatrix::zeros(p * m, p * m);
        q.view_mut((0, 0), (m, m)).copy_from(model.innovation_cov());
        let mut g = DMatrix::zeros(p * m, p * m);
        let mut ck = DMatrix::identity(p * m, p * m);
        for _ in 0..4000 {
            g += &ck * &q * ck.transpose();
            ck = &c * ck;
        }
        let brute = g.view((0, 0), (m, m)).into_owned();
        let fast = model.stationary_covariance().unwrap();
        assert!((fast - &brute).amax() < 1e-10 * brute.amax());
    }

    #[test]
    fn synthetic_ambient_is_stable() {
        let model = VarModel::synthetic_ambient(8, 14).unwrap();
        assert_eq!(model.order(), 14);
        assert!(model.spectral_radius() < 0.9);
    }

    #[test]
    fn model_file_round_trip_and_rejects() {
        let model = var2_m2();
        let bytes = model.to_bytes();
        assert_eq!(&bytes[..4], b"VARM");
        assert_eq!(bytes.len(), 13 + 8 * 3 * 4);
        assert_eq!(VarModel::from_bytes(&bytes).unwrap(), model);

        assert!(VarModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(VarModel::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(VarModel::from_bytes(&bad).is_err());
        assert!(VarModel::from_bytes(&[]).is_err());
    }

    fn whiten_all(model: &VarModel, data: &DMatrix<f64>) -> DMatrix<f64> {
        let mut st = WhitenState::new(model);
        whiten_block(model, &mut st, data).unwrap().0
    }

    proptest! {
        #[test]
        fn whitening_inverts_the_recursion(seed in 0u64..1000, len in 1usize..40) {
            let model = var2_m2();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = DMatrix::from_fn(len, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let w = whiten_all(&model, &data);
            // Rebuild y from w with the forward recursion.
            let mut rebuilt = DMatrix::<f64>::zeros(len, 2);
            for n in 0..len {
                let mut y = model.factor() * w.row(n).transpose();
                for (i, a) in model.coeffs().iter().enumerate() {
                    if n > i {
                        y += a * rebuilt.row(n - i - 1).transpose();
                    }
                }
                rebuilt.set_row(n, &y.transpose());
            }
            prop_assert!((rebuilt - data).abs().max() < 1e-10);
        }

        #[test]
        fn fitted_covariance_is_symmetric_psd(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = DMatrix::from_fn(200, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let fit = fit_var(&data, 1).unwrap();
            let s = fit.innovation_cov();
            prop_assert_eq!(s.clone(), s.transpose());
            prop_assert!(s.clone().symmetric_eigenvalues().iter().all(|v| *v >= 0.0));
        }
    }
}
