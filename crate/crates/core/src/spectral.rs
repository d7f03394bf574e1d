//! Reference computations the flows are checked against.
//!
//! None of these share code with the integrator: the symmetric eigensolver
//! is cyclic Jacobi, the QR iteration reuses only `householder_qr`, and the
//! linear solver is Gaussian elimination with partial pivoting.

use serde::Serialize;

use crate::error::{FlowError, Result};
use crate::matrix::{frobenius_norm, householder_qr, Matrix};

const JACOBI_MAX_SWEEPS: usize = 100;
const CLUSTER_RADIUS: f64 = 1e-6;

/// Eigenvalues sorted in descending order, repeats allowed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spectrum {
    eigenvalues: Vec<f64>,
}

impl Spectrum {
    pub fn from_unsorted(mut values: Vec<f64>) -> Self {
        values.sort_by(|a, b| b.total_cmp(a));
        Spectrum { eigenvalues: values }
    }

    pub fn values(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Sizes of runs of values closer than `radius` to their neighbour.
    fn cluster_sizes(&self, radius: f64) -> Vec<usize> {
        let mut sizes = Vec::new();
        let mut prev: Option<f64> = None;
        for &v in &self.eigenvalues {
            match prev {
                Some(p) if (p - v).abs() <= radius => *sizes.last_mut().unwrap() += 1,
                _ => sizes.push(1),
            }
            prev = Some(v);
        }
        sizes
    }
}

/// Order-preserving pairing of two descending spectra.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumComparison {
    /// `(α, λ, |α − λ|)` in descending order.
    pub matched_pairs: Vec<(f64, f64, f64)>,
    pub max_abs_gap: f64,
    pub multiplicity_ok: bool,
}

pub fn compare_spectra(achieved: &Spectrum, reference: &Spectrum) -> Result<SpectrumComparison> {
    if achieved.len() != reference.len() {
        return Err(FlowError::Dimension(format!(
            "spectra of length {} and {}",
            achieved.len(),
            reference.len()
        )));
    }
    let matched_pairs: Vec<_> = achieved
        .values()
        .iter()
        .zip(reference.values())
        .map(|(&a, &l)| (a, l, (a - l).abs()))
        .collect();
    let max_abs_gap = matched_pairs.iter().fold(0.0f64, |m, p| m.max(p.2));
    let multiplicity_ok =
        achieved.cluster_sizes(CLUSTER_RADIUS) == reference.cluster_sizes(CLUSTER_RADIUS);
    Ok(SpectrumComparison {
        matched_pairs,
        max_abs_gap,
        multiplicity_ok,
    })
}

fn off_diagonal_mass(a: &Matrix) -> f64 {
    a.offdiag_norm()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
///
/// Sweeps stop once the off-diagonal Frobenius mass is at most
/// `1e-13 · ‖s‖_F`.
pub fn jacobi_eigenvalues(s: &Matrix) -> Result<Spectrum> {
    if !s.is_square() {
        return Err(FlowError::Dimension(format!(
            "jacobi_eigenvalues needs a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    let asymmetry = s.relative_asymmetry();
    if asymmetry > 1e-10 {
        return Err(FlowError::Symmetry { asymmetry });
    }
    let n = s.rows();
    // symmetrize so rounding-level asymmetry does not bias the rotations
    let mut a = (s + &s.transpose()).scale(0.5);
    let target = 1e-13 * frobenius_norm(s);

    let mut sweeps = 0;
    while off_diagonal_mass(&a) > target {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(FlowError::Convergence { sweeps });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
            }
        }
    }
    Ok(Spectrum::from_unsorted(a.diagonal()))
}

/// `n` steps of the unshifted QR algorithm: `A_k = Q_k R_k`, `A_{k+1} = R_k Q_k`.
pub fn qr_iteration(a: &Matrix, n: usize) -> Result<Matrix> {
    let mut current = a.clone();
    for _ in 0..n {
        current = qr_step(&current)?;
    }
    Ok(current)
}

pub(crate) fn qr_step(a: &Matrix) -> Result<Matrix> {
    let f = householder_qr(a)?;
    f.r.matmul(&f.q)
}

struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
    pivots: Vec<f64>,
}

/// Partial-pivot elimination; stops at the first (near-)zero pivot.
fn lu_decompose(a: &Matrix, tiny: f64) -> std::result::Result<Lu, usize> {
    let n = a.rows();
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut pivots = Vec::with_capacity(n);
    for k in 0..n {
        let (p, max) = (k..n)
            .map(|i| (i, lu[(i, k)].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if max <= tiny {
            return Err(k);
        }
        if p != k {
            for j in 0..n {
                let tmp = lu[(k, j)];
                lu[(k, j)] = lu[(p, j)];
                lu[(p, j)] = tmp;
            }
            perm.swap(k, p);
        }
        let pivot = lu[(k, k)];
        pivots.push(pivot);
        for i in k + 1..n {
            let f = lu[(i, k)] / pivot;
            lu[(i, k)] = f;
            for j in k + 1..n {
                lu[(i, j)] -= f * lu[(k, j)];
            }
        }
    }
    Ok(Lu { lu, perm, pivots })
}

/// Solves `a x = rhs` for a square `a` and any number of right-hand columns.
pub fn solve(a: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if !a.is_square() || rhs.rows() != a.rows() {
        return Err(FlowError::Dimension(format!(
            "solve with a {}x{} system and {}x{} right-hand side",
            a.rows(),
            a.cols(),
            rhs.rows(),
            rhs.cols()
        )));
    }
    let n = a.rows();
    let tiny = 1e-13 * frobenius_norm(a);
    let Lu { lu, perm, .. } = lu_decompose(a, tiny)
        .map_err(|k| FlowError::Rank(format!("zero pivot in column {k} during elimination")))?;

    let m = rhs.cols();
    let mut x = Matrix::zeros(n, m);
    for c in 0..m {
        let mut y: Vec<f64> = perm.iter().map(|&p| rhs[(p, c)]).collect();
        for i in 0..n {
            for k in 0..i {
                y[i] -= lu[(i, k)] * y[k];
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                y[i] -= lu[(i, k)] * y[k];
            }
            y[i] /= lu[(i, i)];
        }
        for i in 0..n {
            x[(i, c)] = y[i];
        }
    }
    Ok(x)
}

pub fn inverse(a: &Matrix) -> Result<Matrix> {
    solve(a, &Matrix::identity(a.rows()))
}

/// Whether the leading `j × j` block of `p` is invertible, judged by
/// `|det P_J| > 1e-12 · ‖P_J‖_F^J` with the determinant taken from the
/// elimination pivots.
pub fn leading_minor_invertible(p: &Matrix, j: usize) -> Result<bool> {
    if !p.is_square() {
        return Err(FlowError::Dimension("leading minors of a non-square matrix".into()));
    }
    if j == 0 || j > p.rows() {
        return Err(FlowError::Index(format!(
            "leading minor of order {j} for a {}x{} matrix",
            p.rows(),
            p.cols()
        )));
    }
    let mut block = Matrix::zeros(j, j);
    for r in 0..j {
        for c in 0..j {
            block[(r, c)] = p[(r, c)];
        }
    }
    let Ok(Lu { pivots, .. }) = lu_decompose(&block, 0.0) else {
        return Ok(false);
    };
    let det: f64 = pivots.iter().map(|v| v.abs()).product();
    Ok(det > 1e-12 * frobenius_norm(&block).powi(j as i32))
}
