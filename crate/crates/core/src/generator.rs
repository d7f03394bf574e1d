//! Generators `G` of the bracket flow `H' = [H, G(H)]`.
//!
//! * Brockett: `G(H) = [H, A]` for a fixed diagonal `A = diag(a)`.
//! * Toda: `G(H) = L − Lᵀ` where `L` is the strictly lower triangle of `H`.
//! * Wegner: `G(H) = [H, diag(H)]`, non-linear.
//!
//! Brockett and Toda are linear and diagonal in the `E_{i,j}` / `E±_{i,j}`
//! bases: `G(E_{i,j}) = g_{i,j} E±_{i,j}`. The skew table `g` drives both the
//! convergence hypotheses and the predicted exponential rate.

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::matrix::{commutator, Matrix};

/// Relative asymmetry above which a symmetric-only generator refuses input.
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Brockett,
    Toda,
    Wegner,
}

impl std::fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GeneratorKind::Brockett => "brockett",
            GeneratorKind::Toda => "toda",
            GeneratorKind::Wegner => "wegner",
        })
    }
}

impl std::str::FromStr for GeneratorKind {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "brockett" => Ok(GeneratorKind::Brockett),
            "toda" => Ok(GeneratorKind::Toda),
            "wegner" => Ok(GeneratorKind::Wegner),
            other => Err(FlowError::InvalidArgument(format!("unknown generator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorSpec {
    Brockett { a: Vec<f64> },
    Toda,
    Wegner,
}

impl GeneratorSpec {
    pub fn brockett(a: Vec<f64>) -> Result<Self> {
        if a.is_empty() || a.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::InvalidArgument(
                "Brockett diagonal must be non-empty and finite".into(),
            ));
        }
        Ok(GeneratorSpec::Brockett { a })
    }

    /// Brockett with `A = diag(d − 1, …, 1, 0)`.
    pub fn brockett_descending(d: usize) -> Self {
        GeneratorSpec::Brockett {
            a: (0..d).map(|l| (d - 1 - l) as f64).collect(),
        }
    }

    pub fn kind(&self) -> GeneratorKind {
        match self {
            GeneratorSpec::Brockett { .. } => GeneratorKind::Brockett,
            GeneratorSpec::Toda => GeneratorKind::Toda,
            GeneratorSpec::Wegner => GeneratorKind::Wegner,
        }
    }

    /// Recorded, not enforced: the convergence theory assumes a
    /// non-increasing Brockett diagonal.
    pub fn brockett_a_non_increasing(&self) -> Option<bool> {
        match self {
            GeneratorSpec::Brockett { a } => Some(a.windows(2).all(|w| w[0] >= w[1])),
            _ => None,
        }
    }
}

/// Whether a generator should verify that its argument is symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symmetry {
    Required,
    /// Accept non-symmetric input, e.g. the non-symmetric Toda flow.
    Relaxed,
}

fn check_square(h: &Matrix) -> Result<()> {
    if h.is_square() {
        Ok(())
    } else {
        Err(FlowError::Dimension(format!(
            "generator needs a square matrix, got {}x{}",
            h.rows(),
            h.cols()
        )))
    }
}

/// `[H, diag(d)]` computed entrywise as `h_ij d_j − d_i h_ij`, which is
/// bit-for-bit what the full commutator produces and keeps the result
/// exactly skew for symmetric `H`.
fn bracket_with_diagonal(h: &Matrix, d: &[f64]) -> Matrix {
    let n = h.rows();
    let mut g = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                g[(i, j)] = h[(i, j)] * d[j] - d[i] * h[(i, j)];
            }
        }
    }
    g
}

/// `G(H)`, refusing non-symmetric input.
pub fn apply_generator(spec: &GeneratorSpec, h: &Matrix) -> Result<Matrix> {
    apply_generator_with(spec, h, Symmetry::Required)
}

pub fn apply_generator_with(spec: &GeneratorSpec, h: &Matrix, symmetry: Symmetry) -> Result<Matrix> {
    check_square(h)?;
    if symmetry == Symmetry::Required {
        let asymmetry = h.relative_asymmetry();
        if asymmetry > SYMMETRY_TOLERANCE {
            return Err(FlowError::Symmetry { asymmetry });
        }
    }
    let n = h.rows();
    match spec {
        GeneratorSpec::Brockett { a } => {
            if a.len() != n {
                return Err(FlowError::Dimension(format!(
                    "Brockett diagonal has length {} for a {n}x{n} matrix",
                    a.len()
                )));
            }
            Ok(bracket_with_diagonal(h, a))
        }
        GeneratorSpec::Toda => {
            let lower = h.strict_lower();
            Ok(&lower - &lower.transpose())
        }
        GeneratorSpec::Wegner => Ok(bracket_with_diagonal(h, &h.diagonal())),
    }
}

/// `F(H) = [H, G(H)]`.
pub fn vector_field(spec: &GeneratorSpec, h: &Matrix) -> Result<Matrix> {
    vector_field_with(spec, h, Symmetry::Required)
}

pub fn vector_field_with(spec: &GeneratorSpec, h: &Matrix, symmetry: Symmetry) -> Result<Matrix> {
    let g = apply_generator_with(spec, h, symmetry)?;
    commutator(h, &g)
}

/// Skew table `g_{i,j}` with `G(E_{i,j}) = g_{i,j} E±_{i,j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixEigenvalue {
    pub kind: GeneratorKind,
    pub g: Matrix,
}

impl MatrixEigenvalue {
    pub fn dim(&self) -> usize {
        self.g.rows()
    }
}

pub fn matrix_eigenvalue(spec: &GeneratorSpec, d: usize) -> Result<MatrixEigenvalue> {
    let mut g = Matrix::zeros(d, d);
    match spec {
        GeneratorSpec::Brockett { a } => {
            if a.len() != d {
                return Err(FlowError::Dimension(format!(
                    "Brockett diagonal has length {} for dimension {d}",
                    a.len()
                )));
            }
            for i in 0..d {
                for j in i + 1..d {
                    g[(i, j)] = a[j] - a[i];
                    g[(j, i)] = -g[(i, j)];
                }
            }
        }
        GeneratorSpec::Toda => {
            for i in 0..d {
                for j in i + 1..d {
                    g[(i, j)] = -1.0;
                    g[(j, i)] = 1.0;
                }
            }
        }
        GeneratorSpec::Wegner => return Err(FlowError::NotDiagonalizable),
    }
    Ok(MatrixEigenvalue { kind: spec.kind(), g })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub sign_ok: bool,
    /// First `(ℓ, k)` with `k ≥ ℓ` and `ε_ℓ g_{ℓ,k} < 0`.
    pub sign_witness: Option<(usize, usize)>,
    pub epsilon: Vec<i8>,
    pub lower_bound_ok: bool,
    /// `c_ℓ = min_{j≠ℓ} |g_{ℓ,j}|`.
    pub c: Vec<f64>,
}

/// Checks the sign condition `ε_ℓ g_{ℓ,k} ≥ 0 (k ≥ ℓ)` and the lower bound
/// `|g_{ℓ,j}| ≥ c_ℓ > 0 (j ≠ ℓ)` for a constant table.
///
/// `ε_ℓ` is the sign of the first nonzero `g_{ℓ,k}` with `k > ℓ`; a row with
/// none inherits the previous row's sign.
pub fn check_assumptions(me: &MatrixEigenvalue) -> AssumptionCheck {
    let d = me.dim();
    let g = &me.g;
    let mut epsilon = Vec::with_capacity(d);
    let mut sign_witness = None;
    let mut previous = 1i8;
    for l in 0..d {
        let eps = (l + 1..d)
            .map(|k| g[(l, k)])
            .find(|v| *v != 0.0)
            .map_or(previous, |v| if v > 0.0 { 1 } else { -1 });
        previous = eps;
        epsilon.push(eps);
        if sign_witness.is_none() {
            if let Some(k) = (l..d).find(|&k| f64::from(eps) * g[(l, k)] < 0.0) {
                sign_witness = Some((l, k));
            }
        }
    }
    let c: Vec<f64> = (0..d)
        .map(|l| {
            (0..d)
                .filter(|&j| j != l)
                .map(|j| g[(l, j)].abs())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    AssumptionCheck {
        sign_ok: sign_witness.is_none(),
        sign_witness,
        epsilon,
        lower_bound_ok: c.iter().all(|&v| v > 0.0),
        c,
    }
}

/// `g_{i,j}(α_i − α_j)` for the achieved limit diagonal `α`.
pub fn rate_table(me: &MatrixEigenvalue, limit_diag: &[f64]) -> Result<Matrix> {
    let d = me.dim();
    if limit_diag.len() != d {
        return Err(FlowError::Dimension(format!(
            "limit diagonal of length {} for a {d}x{d} table",
            limit_diag.len()
        )));
    }
    let mut t = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if i != j {
                t[(i, j)] = me.g[(i, j)] * (limit_diag[i] - limit_diag[j]);
            }
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictedRate {
    /// Positive decay exponent, `+∞` when no pair contracts.
    pub gamma: f64,
    /// The pair `(i, j)`, `i < j`, attaining the infimum.
    pub slowest_pair: Option<(usize, usize)>,
}

impl PredictedRate {
    /// `false` when the contracting set is empty and `gamma` is the `+∞`
    /// sentinel.
    pub fn is_bounded(&self) -> bool {
        self.slowest_pair.is_some()
    }
}

/// `γ = inf |g_{i,j}(α_i − α_j)|` over pairs `i < j` where the product is
/// negative. `α` must be in the diagonal order the run actually reached.
pub fn predicted_rate(me: &MatrixEigenvalue, limit_diag: &[f64]) -> Result<PredictedRate> {
    let table = rate_table(me, limit_diag)?;
    let d = me.dim();
    let mut best = PredictedRate {
        gamma: f64::INFINITY,
        slowest_pair: None,
    };
    for i in 0..d {
        for j in i + 1..d {
            let v = table[(i, j)];
            if v < 0.0 && v.abs() < best.gamma {
                best = PredictedRate {
                    gamma: v.abs(),
                    slowest_pair: Some((i, j)),
                };
            }
        }
    }
    Ok(best)
}

/// Linearized Wegner spectrum at a diagonal limit: `−(α_i − α_j)²`.
pub fn wegner_rate_table(limit_diag: &[f64]) -> Matrix {
    let d = limit_diag.len();
    let mut t = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if i != j {
                let gap = limit_diag[i] - limit_diag[j];
                t[(i, j)] = -gap * gap;
            }
        }
    }
    t
}

/// `min_{i<j} (α_i − α_j)²`; `+∞` for a single entry.
pub fn wegner_predicted_rate(limit_diag: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in limit_diag.iter().enumerate() {
        for b in &limit_diag[i + 1..] {
            best = best.min((a - b) * (a - b));
        }
    }
    best
}
