//! Post-hoc analysis of trajectories: exponential rate fits, column
//! residuals of the Toda flow, spectrum comparison and the correspondence
//! between integer-time samples and the QR algorithm.

use serde::Serialize;

use crate::error::{FlowError, Result};
use crate::integrator::Trajectory;
use crate::matrix::{expm, frobenius_norm, Matrix};
use crate::spectral::{compare_spectra, jacobi_eigenvalues, qr_step, Spectrum, SpectrumComparison};

/// Values below this are treated as floating-point floor and never fitted.
pub const FIT_FLOOR: f64 = 1e-13;
const MIN_FIT_POINTS: usize = 5;

/// Least-squares fit of `log value` against `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    /// `−slope`, positive for a decaying series.
    pub fitted_rate: f64,
    pub fit_window: (f64, f64),
    pub r_squared: f64,
    pub points: usize,
    /// The log-series has no variance (e.g. a constant series); `r_squared`
    /// is meaningless and reported as 0.
    pub degenerate: bool,
}

impl RateFit {
    pub fn against(self, predicted: f64) -> RateReport {
        RateReport {
            fitted_rate: self.fitted_rate,
            fit_window: self.fit_window,
            r_squared: self.r_squared,
            points: self.points,
            degenerate: self.degenerate,
            predicted,
            relative_gap: (self.fitted_rate - predicted).abs() / predicted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateReport {
    pub fitted_rate: f64,
    pub fit_window: (f64, f64),
    pub r_squared: f64,
    pub points: usize,
    pub degenerate: bool,
    pub predicted: f64,
    /// `|fitted − predicted| / predicted`.
    pub relative_gap: f64,
}

/// Fits `value ≈ C e^{−rate·t}` over the samples with `t` in `window`.
pub fn fit_rate(times: &[f64], values: &[f64], window: (f64, f64)) -> Result<RateFit> {
    if times.len() != values.len() {
        return Err(FlowError::Dimension(format!(
            "{} times for {} values",
            times.len(),
            values.len()
        )));
    }
    let (lo, hi) = window;
    let points: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(t, v)| **t >= lo && **t <= hi && **v >= FIT_FLOOR && v.is_finite())
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    let n = points.len();
    if n < MIN_FIT_POINTS {
        return Err(FlowError::InsufficientData { usable: n });
    }
    let nf = n as f64;
    let mean_t = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let stt: f64 = points.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    let sty: f64 = points.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_y)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let slope = sty / stt;
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 - mean_y - slope * (p.0 - mean_t)).powi(2))
        .sum();
    let degenerate = syy <= 1e-24 * nf * (1.0 + mean_y * mean_y);
    let r_squared = if degenerate {
        0.0
    } else {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(RateFit {
        fitted_rate: -slope,
        fit_window: window,
        r_squared,
        points: n,
        degenerate,
    })
}

/// Default fit window `[t_f/2, 0.9·t_f]`, where `t_f` is the end of the run
/// or, if earlier, the first sample time at which the series has dropped
/// below its floor. The floor is [`FIT_FLOOR`] or ten times the largest value
/// over the last tenth of the samples, whichever is higher, so a series that
/// settles on a plateau (integration noise, an inexact target) is fitted
/// before it gets there.
pub fn auto_window(times: &[f64], values: &[f64]) -> (f64, f64) {
    let t_end = times.last().copied().unwrap_or(0.0);
    let tail = values.len() - values.len().div_ceil(10);
    let plateau = values[tail..].iter().copied().fold(0.0, f64::max);
    let floor = FIT_FLOOR.max(10.0 * plateau);
    let t_floor = times
        .iter()
        .zip(values)
        .find(|(_, v)| **v < floor)
        .map_or(t_end, |(t, _)| *t);
    (0.5 * t_floor, 0.9 * t_floor)
}

/// Fits a series over [`auto_window`].
pub fn fit_rate_auto(times: &[f64], values: &[f64]) -> Result<RateFit> {
    fit_rate(times, values, auto_window(times, values))
}

/// Norm of column `ℓ` from the diagonal down, against the target
/// eigenvalue: `‖(h_{j,ℓ} − α_ℓ δ_{j,ℓ})_{j ≥ ℓ}‖` with `h_{j,ℓ}` the entry in
/// row `j`, column `ℓ`.
///
/// The Toda flow pushes the strictly lower triangle to zero (for
/// non-symmetric data too), so this residual decays at
/// `δ_ℓ = min_{j ≤ ℓ} (λ_j − λ_{j+1})`.
pub fn column_residual_series(traj: &Trajectory, column: usize, target: f64) -> Result<Vec<f64>> {
    let d = traj.dim();
    if column + 1 >= d {
        return Err(FlowError::Index(format!(
            "residual column {column} needs 0 <= column < {}",
            d - 1
        )));
    }
    Ok(traj
        .samples
        .iter()
        .map(|s| {
            let diag = s.h[(column, column)] - target;
            let below: f64 = (column + 1..d).map(|j| s.h[(j, column)].powi(2)).sum();
            (diag * diag + below).sqrt()
        })
        .collect())
}

/// Column residual rate `δ_ℓ = min_{0≤j≤ℓ} (λ_j − λ_{j+1})` for a spectrum
/// in the order the flow sorts it.
pub fn column_residual_rate(spectrum: &[f64], column: usize) -> Result<f64> {
    if column + 1 >= spectrum.len() {
        return Err(FlowError::Index(format!(
            "column {column} for a spectrum of length {}",
            spectrum.len()
        )));
    }
    Ok((0..=column)
        .map(|j| spectrum[j] - spectrum[j + 1])
        .fold(f64::INFINITY, f64::min))
}

/// Sorted limit diagonal against the eigenvalues of `h0`.
pub fn compare_spectrum(limit_diag: &[f64], h0: &Matrix) -> Result<SpectrumComparison> {
    let reference = jacobi_eigenvalues(h0)?;
    compare_spectra(&Spectrum::from_unsorted(limit_diag.to_vec()), &reference)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QrCompareReport {
    /// `per_step_gaps[n] = ‖e^{H(n)} − D_n QRⁿ(e^{H0}) D_n‖_F / ‖QRⁿ(e^{H0})‖_F`.
    pub per_step_gaps: Vec<f64>,
    /// Diagonal of each `D_n`.
    pub sign_matrices: Vec<Vec<i8>>,
}

impl QrCompareReport {
    pub fn max_gap(&self, from: usize) -> f64 {
        self.per_step_gaps
            .iter()
            .skip(from)
            .copied()
            .fold(0.0, f64::max)
    }
}

/// Picks `D = diag(±1)` column by column so that `D·a·D` is closest to
/// `target`. `D` and `−D` act identically, so `d_0 = +1`.
fn align_signs(target: &Matrix, a: &Matrix) -> Vec<i8> {
    let n = a.rows();
    let mut signs: Vec<i8> = vec![1; n];
    for j in 1..n {
        let cost = |s: f64| -> f64 {
            (0..j)
                .map(|i| {
                    let di = f64::from(signs[i]);
                    (target[(i, j)] - di * s * a[(i, j)]).powi(2)
                        + (target[(j, i)] - di * s * a[(j, i)]).powi(2)
                })
                .sum()
        };
        signs[j] = if cost(-1.0) < cost(1.0) { -1 } else { 1 };
    }
    signs
}

fn conjugate_by_signs(a: &Matrix, signs: &[i8]) -> Matrix {
    let mut out = a.clone();
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            out[(i, j)] *= f64::from(signs[i] * signs[j]);
        }
    }
    out
}

/// Compares `e^{H(n)}` from integer-time samples with `n` steps of the QR
/// algorithm on `e^{H0}`, for `n = 0..=n_max`.
pub fn qr_compare(traj: &Trajectory, h0: &Matrix, n_max: usize) -> Result<QrCompareReport> {
    let mut qr_iterate = expm(h0)?;
    let mut per_step_gaps = Vec::with_capacity(n_max + 1);
    let mut sign_matrices = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        if n > 0 {
            qr_iterate = qr_step(&qr_iterate)?;
        }
        let sample = traj
            .sample_at(n as f64)
            .ok_or_else(|| FlowError::State(format!("trajectory has no sample at t = {n}")))?;
        let flow_exp = expm(&sample.h)?;
        let signs = align_signs(&flow_exp, &qr_iterate);
        let aligned = conjugate_by_signs(&qr_iterate, &signs);
        per_step_gaps.push(frobenius_norm(&(&flow_exp - &aligned)) / frobenius_norm(&qr_iterate));
        sign_matrices.push(signs);
    }
    Ok(QrCompareReport {
        per_step_gaps,
        sign_matrices,
    })
}
