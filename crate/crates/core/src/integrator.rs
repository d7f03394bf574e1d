//! Adaptive RK4 integration of `H' = [H, G(H)]`, optionally co-evolving the
//! factors
//!
//! ```text
//! g1' = g1 G(H),        g1(0) = I
//! g2' = (H − G(H)) g2,  g2(0) = I
//! ```
//!
//! for which `e^{tH0} = g1 g2` and `e^{tH(t)} = g2 g1`. The factors are not
//! re-projected by default: their drift is measured and bounded, so the
//! factorization identities are checked against an honest trajectory.
//!
//! Error control is step doubling: one step of size `dt` against two of
//! size `dt/2`, error estimate `|difference| / 15` per entry, weighted by
//! `abs_tol + rel_tol·|entry|` and combined as a root mean square. The
//! per-entry weights keep small off-diagonal entries accurate in absolute
//! terms; the flows drive them to zero and their decay is what gets measured.

use crate::error::{DriftMonitor, FlowError, Result};
use crate::generator::{apply_generator_with, GeneratorKind, GeneratorSpec, Symmetry, SYMMETRY_TOLERANCE};
use crate::matrix::{commutator, expm, frobenius_norm, householder_qr, Matrix};

const MIN_STEP: f64 = 1e-14;
const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

/// A snapshot `(t, H, g1, g2)` of the flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub h: Matrix,
    pub g1: Option<Matrix>,
    pub g2: Option<Matrix>,
}

impl FlowState {
    pub fn new(h: Matrix) -> Self {
        FlowState {
            t: 0.0,
            h,
            g1: None,
            g2: None,
        }
    }

    /// Initial state with `g1 = g2 = I`.
    pub fn with_factors(h: Matrix) -> Self {
        let n = h.rows();
        FlowState {
            t: 0.0,
            h,
            g1: Some(Matrix::identity(n)),
            g2: Some(Matrix::identity(n)),
        }
    }

    pub fn has_factors(&self) -> bool {
        self.g1.is_some() && self.g2.is_some()
    }

    /// `‖g1ᵀ g1 − I‖_F`.
    pub fn unitarity_drift(&self) -> Option<f64> {
        self.g1.as_ref().map(|g1| {
            let gram = &g1.transpose() * g1;
            frobenius_norm(&(&gram - &Matrix::identity(g1.rows())))
        })
    }

    /// Strictly-lower Frobenius mass of `g2` relative to `‖g2‖_F`.
    pub fn triangularity_drift(&self) -> Option<f64> {
        self.g2.as_ref().map(|g2| {
            let norm = frobenius_norm(g2);
            if norm == 0.0 {
                0.0
            } else {
                g2.strict_lower_norm() / norm
            }
        })
    }

    fn is_finite(&self) -> bool {
        self.h.is_finite()
            && self.g1.as_ref().is_none_or(Matrix::is_finite)
            && self.g2.as_ref().is_none_or(Matrix::is_finite)
    }

    fn components(&self) -> impl Iterator<Item = &Matrix> {
        std::iter::once(&self.h).chain(self.g1.as_ref()).chain(self.g2.as_ref())
    }
}

/// Right-hand side of the coupled system at one state.
struct Derivative {
    h: Matrix,
    g1: Option<Matrix>,
    g2: Option<Matrix>,
}

fn derivative(spec: &GeneratorSpec, state: &FlowState) -> Result<Derivative> {
    let g = apply_generator_with(spec, &state.h, Symmetry::Relaxed)?;
    let dh = commutator(&state.h, &g)?;
    let dg1 = match &state.g1 {
        Some(g1) => Some(g1.matmul(&g)?),
        None => None,
    };
    let dg2 = match &state.g2 {
        Some(g2) => Some((&state.h - &g).matmul(g2)?),
        None => None,
    };
    Ok(Derivative {
        h: dh,
        g1: dg1,
        g2: dg2,
    })
}

fn offset(state: &FlowState, s: f64, k: &Derivative) -> FlowState {
    let shift = |x: &Option<Matrix>, dx: &Option<Matrix>| match (x, dx) {
        (Some(x), Some(dx)) => Some(x.add_scaled(s, dx)),
        _ => None,
    };
    FlowState {
        t: state.t,
        h: state.h.add_scaled(s, &k.h),
        g1: shift(&state.g1, &k.g1),
        g2: shift(&state.g2, &k.g2),
    }
}

/// One classical RK4 step of size `dt`, all present components advanced with
/// the same stages.
pub fn step(spec: &GeneratorSpec, state: &FlowState, dt: f64) -> Result<FlowState> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(FlowError::InvalidArgument(format!("step size {dt} must be positive")));
    }
    if !state.is_finite() {
        return Err(FlowError::Numerical("RK4 step (non-finite input state)".into()));
    }
    let k1 = derivative(spec, state)?;
    let k2 = derivative(spec, &offset(state, 0.5 * dt, &k1))?;
    let k3 = derivative(spec, &offset(state, 0.5 * dt, &k2))?;
    let k4 = derivative(spec, &offset(state, dt, &k3))?;

    let combine = |x: &Matrix, a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix| {
        x.add_scaled(dt / 6.0, a)
            .add_scaled(dt / 3.0, b)
            .add_scaled(dt / 3.0, c)
            .add_scaled(dt / 6.0, d)
    };
    let combine_opt = |x: &Option<Matrix>, f: fn(&Derivative) -> &Option<Matrix>| {
        x.as_ref().map(|x| {
            combine(
                x,
                f(&k1).as_ref().unwrap(),
                f(&k2).as_ref().unwrap(),
                f(&k3).as_ref().unwrap(),
                f(&k4).as_ref().unwrap(),
            )
        })
    };
    let next = FlowState {
        t: state.t + dt,
        h: combine(&state.h, &k1.h, &k2.h, &k3.h, &k4.h),
        g1: combine_opt(&state.g1, |k| &k.g1),
        g2: combine_opt(&state.g2, |k| &k.g2),
    };
    if !next.is_finite() {
        return Err(FlowError::Numerical(format!("RK4 step at t = {}", state.t)));
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub h_init: f64,
    pub h_max: f64,
    pub t_end: f64,
    /// Stride between emitted samples.
    pub sample_dt: f64,
    pub unitarity_bound: f64,
    /// Only enforced for the Toda generator, where `g2` must stay upper
    /// triangular.
    pub triangularity_bound: f64,
    /// Permit a non-symmetric `H0` (the non-symmetric Toda flow).
    pub allow_nonsymmetric: bool,
    /// Re-project `g1` onto the orthogonal group after every accepted step
    /// (`g1 = QR`, `g1 ← Q`, `g2 ← R g2`).
    pub reorthogonalize: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rel_tol: 1e-9,
            abs_tol: 1e-12,
            h_init: 1e-3,
            h_max: 0.5,
            t_end: 10.0,
            sample_dt: 0.05,
            unitarity_bound: 1e-7,
            triangularity_bound: 1e-8,
            allow_nonsymmetric: false,
            reorthogonalize: false,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("h_init", self.h_init),
            ("h_max", self.h_max),
            ("sample_dt", self.sample_dt),
            ("unitarity_bound", self.unitarity_bound),
            ("triangularity_bound", self.triangularity_bound),
        ];
        for (name, v) in positive {
            if v <= 0.0 || !v.is_finite() {
                return Err(FlowError::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.t_end < 0.0 || !self.t_end.is_finite() {
            return Err(FlowError::InvalidArgument(format!(
                "t_end must be non-negative, got {}",
                self.t_end
            )));
        }
        if self.t_end > 0.0 && self.sample_dt > self.t_end {
            return Err(FlowError::InvalidArgument(format!(
                "sample_dt {} exceeds t_end {}",
                self.sample_dt, self.t_end
            )));
        }
        Ok(())
    }

    /// Requested sample times after `t = 0`: multiples of `sample_dt`, plus
    /// `t_end` itself when it is not one.
    fn sample_times(&self) -> Vec<f64> {
        if self.t_end == 0.0 {
            return Vec::new();
        }
        let count = (self.t_end / self.sample_dt + 1e-9).floor() as usize;
        let mut times: Vec<f64> = (1..=count).map(|k| k as f64 * self.sample_dt).collect();
        match times.last_mut() {
            Some(last) if (self.t_end - *last).abs() <= 1e-9 * self.t_end => *last = self.t_end,
            _ => times.push(self.t_end),
        }
        times
    }
}

/// Scalar series derived from the samples; one entry per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySeries {
    pub time: Vec<f64>,
    pub hs_norm: Vec<f64>,
    pub offdiag_norm: Vec<f64>,
    /// `diagonal[ℓ][k] = h_{ℓ,ℓ}(t_k)`.
    pub diagonal: Vec<Vec<f64>>,
    pub unitarity_drift: Option<Vec<f64>>,
    pub triangularity_drift: Option<Vec<f64>>,
}

impl TrajectorySeries {
    fn from_samples(samples: &[FlowState]) -> Self {
        let d = samples[0].h.rows();
        let with_factors = samples[0].has_factors();
        TrajectorySeries {
            time: samples.iter().map(|s| s.t).collect(),
            hs_norm: samples.iter().map(|s| frobenius_norm(&s.h)).collect(),
            offdiag_norm: samples.iter().map(|s| s.h.offdiag_norm()).collect(),
            diagonal: (0..d)
                .map(|l| samples.iter().map(|s| s.h[(l, l)]).collect())
                .collect(),
            unitarity_drift: with_factors
                .then(|| samples.iter().filter_map(FlowState::unitarity_drift).collect()),
            triangularity_drift: with_factors
                .then(|| samples.iter().filter_map(FlowState::triangularity_drift).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<FlowState>,
    pub series: TrajectorySeries,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.samples[0].h.rows()
    }

    pub fn initial(&self) -> &FlowState {
        &self.samples[0]
    }

    pub fn last(&self) -> &FlowState {
        self.samples.last().expect("trajectory is never empty")
    }

    /// The sample taken at time `t`, if one was emitted there.
    pub fn sample_at(&self, t: f64) -> Option<&FlowState> {
        self.samples.iter().find(|s| (s.t - t).abs() <= 1e-9 * t.abs().max(1.0))
    }

    /// Largest relative deviation of `‖H(t)‖_F` from its initial value.
    pub fn hs_norm_variation(&self) -> f64 {
        let h0 = self.series.hs_norm[0];
        if h0 == 0.0 {
            return 0.0;
        }
        self.series
            .hs_norm
            .iter()
            .map(|v| (v - h0).abs() / h0)
            .fold(0.0, f64::max)
    }
}

fn error_ratio(coarse: &FlowState, fine: &FlowState, cfg: &IntegratorConfig) -> f64 {
    coarse
        .components()
        .zip(fine.components())
        .map(|(c, f)| {
            let sum: f64 = c
                .as_slice()
                .iter()
                .zip(f.as_slice())
                .map(|(a, b)| {
                    let e = (b - a) / 15.0 / (cfg.abs_tol + cfg.rel_tol * b.abs());
                    e * e
                })
                .sum();
            (sum / c.as_slice().len() as f64).sqrt()
        })
        .fold(0.0, f64::max)
}

fn check_drift(spec: &GeneratorSpec, state: &FlowState, cfg: &IntegratorConfig) -> Result<()> {
    if let Some(value) = state.unitarity_drift() {
        if value > cfg.unitarity_bound {
            return Err(FlowError::Drift {
                monitor: DriftMonitor::Unitarity,
                value,
                bound: cfg.unitarity_bound,
                t: state.t,
            });
        }
    }
    if spec.kind() == GeneratorKind::Toda {
        if let Some(value) = state.triangularity_drift() {
            if value > cfg.triangularity_bound {
                return Err(FlowError::Drift {
                    monitor: DriftMonitor::Triangularity,
                    value,
                    bound: cfg.triangularity_bound,
                    t: state.t,
                });
            }
        }
    }
    Ok(())
}

fn reproject(state: &mut FlowState) -> Result<()> {
    if let (Some(g1), Some(g2)) = (&state.g1, &state.g2) {
        let f = householder_qr(g1)?;
        let new_g2 = f.r.matmul(g2)?;
        state.g1 = Some(f.q);
        state.g2 = Some(new_g2);
    }
    Ok(())
}

/// Integrates the flow from `h0` over `[0, cfg.t_end]`.
///
/// Steps are clipped so that every requested sample time is hit exactly;
/// a clipped step does not shrink the controller's step proposal.
pub fn integrate(
    spec: &GeneratorSpec,
    h0: &Matrix,
    cfg: &IntegratorConfig,
    with_factors: bool,
) -> Result<Trajectory> {
    cfg.validate()?;
    if !h0.is_square() {
        return Err(FlowError::Dimension(format!(
            "initial matrix is {}x{}",
            h0.rows(),
            h0.cols()
        )));
    }
    if !h0.is_finite() {
        return Err(FlowError::Numerical("initial matrix".into()));
    }
    if !cfg.allow_nonsymmetric {
        let asymmetry = h0.relative_asymmetry();
        if asymmetry > SYMMETRY_TOLERANCE {
            return Err(FlowError::Symmetry { asymmetry });
        }
    }
    // surfaces generator/dimension mismatches before any stepping
    apply_generator_with(spec, h0, Symmetry::Relaxed)?;

    let mut state = if with_factors {
        FlowState::with_factors(h0.clone())
    } else {
        FlowState::new(h0.clone())
    };
    let mut samples = vec![state.clone()];
    let mut dt = cfg.h_init.min(cfg.h_max);
    let mut accepted_steps = 0;
    let mut rejected_steps = 0;

    for target in cfg.sample_times() {
        while state.t < target {
            let remaining = target - state.t;
            let mut trial = dt.min(remaining);
            let clipped = trial < dt;
            loop {
                let attempt = step(spec, &state, trial).and_then(|coarse| {
                    let mid = step(spec, &state, 0.5 * trial)?;
                    let fine = step(spec, &mid, 0.5 * trial)?;
                    Ok((coarse, fine))
                });
                let (ratio, fine) = match attempt {
                    Ok((coarse, fine)) => (error_ratio(&coarse, &fine, cfg), Some(fine)),
                    Err(FlowError::Numerical(_)) => (f64::INFINITY, None),
                    Err(e) => return Err(e),
                };
                let factor = if ratio == 0.0 {
                    MAX_FACTOR
                } else {
                    (SAFETY * ratio.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
                };
                match fine {
                    Some(mut next) if ratio <= 1.0 => {
                        accepted_steps += 1;
                        next.t = if trial == remaining { target } else { state.t + trial };
                        if cfg.reorthogonalize {
                            reproject(&mut next)?;
                        }
                        check_drift(spec, &next, cfg)?;
                        state = next;
                        let proposal = trial * factor;
                        dt = if clipped { dt.max(proposal) } else { proposal }.min(cfg.h_max);
                        break;
                    }
                    _ => {
                        rejected_steps += 1;
                        trial *= factor.min(1.0);
                        dt = trial;
                        if trial < MIN_STEP {
                            return Err(FlowError::Stiffness { t: state.t, dt: trial });
                        }
                    }
                }
            }
        }
        samples.push(state.clone());
    }

    let series = TrajectorySeries::from_samples(&samples);
    Ok(Trajectory {
        samples,
        series,
        accepted_steps,
        rejected_steps,
    })
}

/// Relative residuals of the two exponential factorizations at a state:
/// `(‖e^{tH0} − g1 g2‖ / ‖e^{tH0}‖, ‖e^{tH(t)} − g2 g1‖ / ‖e^{tH(t)}‖)`.
pub fn factor_residuals(state: &FlowState, h0: &Matrix) -> Result<(f64, f64)> {
    let (Some(g1), Some(g2)) = (&state.g1, &state.g2) else {
        return Err(FlowError::State("factor residuals need g1 and g2".into()));
    };
    let e0 = expm(&h0.scale(state.t))?;
    let et = expm(&state.h.scale(state.t))?;
    let first = frobenius_norm(&(&e0 - &g1.matmul(g2)?)) / frobenius_norm(&e0);
    let second = frobenius_norm(&(&et - &g2.matmul(g1)?)) / frobenius_norm(&et);
    Ok((first, second))
}

/// `‖g1ᵀ H0 g1 − H(t)‖_F / ‖H0‖_F`.
pub fn conjugation_residual(state: &FlowState, h0: &Matrix) -> Result<f64> {
    let Some(g1) = &state.g1 else {
        return Err(FlowError::State("conjugation residual needs g1".into()));
    };
    let conj = g1.transpose().matmul(h0)?.matmul(g1)?;
    Ok(frobenius_norm(&(&conj - &state.h)) / frobenius_norm(h0))
}
