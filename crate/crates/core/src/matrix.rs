//! Dense real matrices and the handful of factorizations the flows need.
//!
//! Storage is plain row-major `Vec<f64>`. Dimensions here are small (a few
//! hundred at most), so nothing is blocked or packed.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use crate::error::{FlowError, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(FlowError::Dimension(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(FlowError::Dimension(format!(
                "{} entries supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::Numerical("matrix construction".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != n_cols) {
            return Err(FlowError::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Matrix::from_vec(n_rows, n_cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major view of the entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    /// `diag(H)`: the diagonal part as a matrix.
    pub fn diagonal_part(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows.min(self.cols) {
            m[(i, i)] = self[(i, i)];
        }
        m
    }

    /// Entries strictly below the diagonal; everything else zeroed.
    pub fn strict_lower(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..i.min(self.cols) {
                m[(i, j)] = self[(i, j)];
            }
        }
        m
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self + s * other`, the workhorse of the Runge–Kutta stages.
    pub fn add_scaled(&self, s: f64, other: &Matrix) -> Matrix {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "add_scaled shape mismatch"
        );
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + s * b)
                .collect(),
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(FlowError::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let other_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(other_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Frobenius inner product `Tr(AᵀB)`.
    pub fn inner(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `‖A − Aᵀ‖_F / ‖A‖_F` (zero for the zero matrix).
    pub fn relative_asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let norm = frobenius_norm(self);
        if norm == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..self.rows {
            for j in 0..i {
                let d = self[(i, j)] - self[(j, i)];
                acc += 2.0 * d * d;
            }
        }
        acc.sqrt() / norm
    }

    /// Frobenius norm of `H − diag(H)`.
    pub fn offdiag_norm(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                if i != j {
                    acc += self[(i, j)] * self[(i, j)];
                }
            }
        }
        acc.sqrt()
    }

    /// Frobenius norm of the strictly lower triangle.
    pub fn strict_lower_norm(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.rows {
            for j in 0..i.min(self.cols) {
                acc += self[(i, j)] * self[(i, j)];
            }
        }
        acc.sqrt()
    }

    fn check_square(&self, what: &str) -> Result<()> {
        if self.is_square() {
            Ok(())
        } else {
            Err(FlowError::Dimension(format!(
                "{what} needs a square matrix, got {}x{}",
                self.rows, self.cols
            )))
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for v in self.row(i) {
                write!(f, "{v:>12.6} ")?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

// Operator forms panic on shape mismatch; the named functions return errors.

impl Mul for &Matrix {
    type Output = Matrix;

    fn mul(self, rhs: &Matrix) -> Matrix {
        self.matmul(rhs).expect("matrix product shape mismatch")
    }
}

impl Add for &Matrix {
    type Output = Matrix;

    fn add(self, rhs: &Matrix) -> Matrix {
        self.add_scaled(1.0, rhs)
    }
}

impl Sub for &Matrix {
    type Output = Matrix;

    fn sub(self, rhs: &Matrix) -> Matrix {
        self.add_scaled(-1.0, rhs)
    }
}

impl Neg for &Matrix {
    type Output = Matrix;

    fn neg(self) -> Matrix {
        self.scale(-1.0)
    }
}

/// The bracket `[a, b] = ab − ba`.
pub fn commutator(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.check_square("commutator")?;
    if a.rows != b.rows || a.cols != b.cols {
        return Err(FlowError::Dimension(format!(
            "commutator of {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(&a.matmul(b)? - &b.matmul(a)?)
}

/// `√Σ a_ij²`, the Hilbert–Schmidt norm in finite dimension.
pub fn frobenius_norm(a: &Matrix) -> f64 {
    // scaled accumulation keeps tiny off-diagonal tails from underflowing
    let scale = a.max_abs();
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let sum: f64 = a.data.iter().map(|v| (v / scale) * (v / scale)).sum();
    scale * sum.sqrt()
}

/// Matrix exponential by scaling and squaring.
///
/// The input is scaled by `2^-s` until its Frobenius norm is at most 0.5,
/// the Taylor series is summed until the next term is below machine
/// precision relative to the partial sum, and the result is squared `s`
/// times.
pub fn expm(a: &Matrix) -> Result<Matrix> {
    a.check_square("expm")?;
    let norm = frobenius_norm(a);
    if !norm.is_finite() {
        return Err(FlowError::Numerical("expm (non-finite input)".into()));
    }
    let mut squarings = 0i32;
    while norm / 2f64.powi(squarings) > 0.5 {
        squarings += 1;
    }
    let scaled = a.scale(2f64.powi(-squarings));
    let n = a.rows;
    let mut sum = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..=40 {
        term = (&term * &scaled).scale(1.0 / k as f64);
        sum = &sum + &term;
        if frobenius_norm(&term) <= f64::EPSILON * frobenius_norm(&sum) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
        if !sum.is_finite() {
            return Err(FlowError::Numerical("expm (overflow while squaring)".into()));
        }
    }
    Ok(sum)
}

/// `a = q r` with `q` orthogonal and `r` upper triangular.
#[derive(Debug, Clone, PartialEq)]
pub struct QrFactors {
    pub q: Matrix,
    pub r: Matrix,
}

/// Householder QR of a square matrix.
///
/// The diagonal of `r` is made nonnegative by flipping the matching columns
/// of `q` (and rows of `r`), which makes the factorization unique for
/// invertible input.
pub fn householder_qr(a: &Matrix) -> Result<QrFactors> {
    a.check_square("householder_qr")?;
    let n = a.rows;
    let a_norm = frobenius_norm(a);
    let mut r = a.clone();
    let mut q = Matrix::identity(n);

    for k in 0..n.saturating_sub(1) {
        let below: f64 = (k + 1..n).map(|i| r[(i, k)] * r[(i, k)]).sum();
        if below == 0.0 {
            continue;
        }
        let x0 = r[(k, k)];
        let norm = (x0 * x0 + below).sqrt();
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v = vec![0.0; n - k];
        v[0] = x0 - alpha;
        for i in k + 1..n {
            v[i - k] = r[(i, k)];
        }
        let v_norm2: f64 = v.iter().map(|x| x * x).sum();

        // r <- (I - 2 v vᵀ / vᵀv) r on rows k.., columns k..
        for j in k..n {
            let dot: f64 = (k..n).map(|i| v[i - k] * r[(i, j)]).sum();
            let f = 2.0 * dot / v_norm2;
            for i in k..n {
                r[(i, j)] -= f * v[i - k];
            }
        }
        r[(k, k)] = alpha;
        for i in k + 1..n {
            r[(i, k)] = 0.0;
        }
        // q <- q (I - 2 v vᵀ / vᵀv)
        for i in 0..n {
            let dot: f64 = (k..n).map(|j| q[(i, j)] * v[j - k]).sum();
            let f = 2.0 * dot / v_norm2;
            for j in k..n {
                q[(i, j)] -= f * v[j - k];
            }
        }
    }

    for i in 0..n {
        if r[(i, i)] < 0.0 {
            for j in 0..n {
                r[(i, j)] = -r[(i, j)];
                q[(j, i)] = -q[(j, i)];
            }
        }
    }

    for i in 0..n {
        if r[(i, i)].abs() < 1e-13 * a_norm || a_norm == 0.0 {
            return Err(FlowError::Rank(format!(
                "|r[{i},{i}]| = {:.3e} below 1e-13 * ‖a‖_F",
                r[(i, i)].abs()
            )));
        }
    }
    Ok(QrFactors { q, r })
}

fn check_index(i: usize, j: usize, d: usize) -> Result<()> {
    if i >= d || j >= d {
        return Err(FlowError::Index(format!("({i}, {j}) outside a {d}x{d} basis")));
    }
    Ok(())
}

/// Symmetric basis element `E_{i,j}`: unit Frobenius norm, supported on
/// `(i,j)` and `(j,i)`.
pub fn basis_sym(i: usize, j: usize, d: usize) -> Result<Matrix> {
    check_index(i, j, d)?;
    let mut m = Matrix::zeros(d, d);
    if i == j {
        m[(i, i)] = 1.0;
    } else {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        m[(i, j)] = s;
        m[(j, i)] = s;
    }
    Ok(m)
}

/// Skew basis element `E±_{i,j}`: `+1/√2` at `(i,j)`, `−1/√2` at `(j,i)`.
pub fn basis_skew(i: usize, j: usize, d: usize) -> Result<Matrix> {
    check_index(i, j, d)?;
    if i == j {
        return Err(FlowError::Index(format!(
            "skew basis element ({i}, {i}) is zero and excluded"
        )));
    }
    let mut m = Matrix::zeros(d, d);
    let s = std::f64::consts::FRAC_1_SQRT_2;
    m[(i, j)] = s;
    m[(j, i)] = -s;
    Ok(m)
}

/// The skew-symmetric `B_d`: `+1` strictly below the diagonal, `−1` above.
pub fn skew_lower_ones(d: usize) -> Matrix {
    let mut b = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..i {
            b[(i, j)] = 1.0;
            b[(j, i)] = -1.0;
        }
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        frobenius_norm(&(a - b)) <= tol
    }

    /// Plain Taylor series without scaling, for small-norm inputs.
    fn taylor_exp(a: &Matrix, terms: usize) -> Matrix {
        let mut sum = Matrix::identity(a.rows());
        let mut term = Matrix::identity(a.rows());
        for k in 1..terms {
            term = (&term * a).scale(1.0 / k as f64);
            sum = &sum + &term;
        }
        sum
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(matches!(
            Matrix::from_vec(2, 2, vec![1.0; 3]),
            Err(FlowError::Dimension(_))
        ));
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(FlowError::Numerical(_))
        ));
        assert!(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn commutator_examples() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(commutator(&a, &a).unwrap(), Matrix::zeros(2, 2));

        let d = Matrix::from_diag(&[1.0, 2.0]);
        let n = Matrix::from_rows(&[[0.0, 1.0], [0.0, 0.0]]).unwrap();
        let expected = Matrix::from_rows(&[[0.0, -1.0], [0.0, 0.0]]).unwrap();
        assert_eq!(commutator(&d, &n).unwrap(), expected);

        let s = Matrix::from_rows(&[[1.0, 2.0, 0.5], [2.0, -1.0, 3.0], [0.5, 3.0, 2.0]]).unwrap();
        let k = skew_lower_ones(3);
        let c = commutator(&s, &k).unwrap();
        assert!(close(&c, &c.transpose(), 1e-14));

        let wrong = Matrix::zeros(3, 3);
        assert!(matches!(commutator(&a, &wrong), Err(FlowError::Dimension(_))));
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 3)), 0.0);
        for d in 1..6 {
            let n = frobenius_norm(&Matrix::identity(d));
            assert!((n - (d as f64).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn expm_examples() {
        assert!(close(&expm(&Matrix::zeros(4, 4)).unwrap(), &Matrix::identity(4), 0.0));

        let lambdas = [1.0, -2.0, 0.5, 3.0];
        let e = expm(&Matrix::from_diag(&lambdas)).unwrap();
        for (i, l) in lambdas.iter().enumerate() {
            assert!((e[(i, i)] - l.exp()).abs() <= 1e-13 * l.exp());
        }
        assert!(e.offdiag_norm() == 0.0);

        let b = skew_lower_ones(5);
        let q = expm(&b).unwrap();
        let gram = &q.transpose() * &q;
        assert!(frobenius_norm(&(&gram - &Matrix::identity(5))) <= 1e-10);
    }

    #[test]
    fn expm_matches_long_taylor_on_small_inputs() {
        let samples = [
            skew_lower_ones(4).scale(0.2),
            Matrix::from_rows(&[[0.3, -0.1, 0.2], [0.05, -0.4, 0.1], [0.2, 0.25, 0.1]]).unwrap(),
            basis_sym(0, 2, 3).unwrap().scale(0.9),
        ];
        for a in &samples {
            assert!(frobenius_norm(a) <= 1.0);
            let reference = taylor_exp(a, 60);
            let e = expm(a).unwrap();
            assert!(frobenius_norm(&(&e - &reference)) <= 1e-13 * frobenius_norm(&reference));
        }
    }

    #[test]
    fn expm_overflow_is_an_error() {
        let a = Matrix::from_diag(&[1e6, 0.0]);
        assert!(matches!(expm(&a), Err(FlowError::Numerical(_))));
    }

    #[test]
    fn qr_trivial_cases() {
        let f = householder_qr(&Matrix::identity(4)).unwrap();
        assert_eq!(f.q, Matrix::identity(4));
        assert_eq!(f.r, Matrix::identity(4));

        let u = Matrix::from_rows(&[[2.0, 1.0, -3.0], [0.0, 0.5, 4.0], [0.0, 0.0, 7.0]]).unwrap();
        let f = householder_qr(&u).unwrap();
        assert!(close(&f.q, &Matrix::identity(3), 1e-15));
        assert!(close(&f.r, &u, 1e-14));
    }

    #[test]
    fn qr_detects_rank_deficiency() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
        assert!(matches!(householder_qr(&a), Err(FlowError::Rank(_))));
        assert!(matches!(householder_qr(&Matrix::zeros(3, 3)), Err(FlowError::Rank(_))));
    }

    #[test]
    fn qr_positive_diagonal_on_negative_input() {
        let a = Matrix::from_diag(&[-2.0, 3.0, -1.0]);
        let f = householder_qr(&a).unwrap();
        assert!(f.r.diagonal().iter().all(|&v| v > 0.0));
        assert!(close(&(&f.q * &f.r), &a, 1e-14));
    }

    #[test]
    fn basis_examples() {
        assert_eq!(
            basis_sym(0, 0, 2).unwrap(),
            Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap()
        );
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(
            basis_sym(0, 1, 2).unwrap(),
            Matrix::from_rows(&[[0.0, s], [s, 0.0]]).unwrap()
        );
        assert!(basis_sym(2, 0, 2).is_err());
        assert!(basis_skew(1, 1, 3).is_err());
    }

    #[test]
    fn basis_is_orthonormal() {
        // brute-force Gram matrix over every E_{i,j} with i <= j, d = 4
        let d = 4;
        let mut elems = Vec::new();
        for i in 0..d {
            for j in i..d {
                elems.push(basis_sym(i, j, d).unwrap());
            }
        }
        for (a, ea) in elems.iter().enumerate() {
            for (b, eb) in elems.iter().enumerate() {
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((ea.inner(eb) - expected).abs() < 1e-15);
            }
        }
        let mut skews = Vec::new();
        for i in 0..d {
            for j in i + 1..d {
                skews.push(basis_skew(i, j, d).unwrap());
            }
        }
        for (a, ea) in skews.iter().enumerate() {
            for (b, eb) in skews.iter().enumerate() {
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((ea.inner(eb) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn skew_lower_ones_examples() {
        assert_eq!(skew_lower_ones(1), Matrix::zeros(1, 1));
        assert_eq!(
            skew_lower_ones(2),
            Matrix::from_rows(&[[0.0, -1.0], [1.0, 0.0]]).unwrap()
        );
        let b5 = skew_lower_ones(5);
        assert_eq!(b5.transpose(), -&b5);
        assert_eq!(frobenius_norm(&b5).powi(2).round(), 20.0);
        assert!((frobenius_norm(&b5).powi(2) - 20.0).abs() < 1e-12);
    }
}
