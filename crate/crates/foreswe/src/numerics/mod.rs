//! Numeric substrate: dense matrices, stable row softmax, Cholesky solves
//! with an escalating jitter policy, and a reverse-mode gradient tape.
//!
//! Everything downstream (encoder, GP, metrics) builds on this module, so the
//! contracts here are deliberately strict: softmax rows sum to one even under
//! extreme inputs, Cholesky either factorizes (possibly with reported jitter)
//! or fails loudly, and every tape operation's adjoint is validated against
//! central differences in the test suite.

mod matrix;
mod optim;
mod quantile;
mod tape;

use std::error::Error;
use std::fmt;

pub use matrix::Matrix;
pub use optim::{Adam, GradientDescent};
pub use quantile::normal_quantile;
pub use tape::{GradientTape, LmcGramSpec, TensorId};

use crate::scalar::Scalar;

/// Errors surfaced by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum NumericsError {
    /// Matrix could not be factorized even at the maximum jitter level.
    NotPositiveDefinite { size: usize, max_jitter: f64 },
    /// A square matrix was required.
    NonSquare { rows: usize, cols: usize },
    /// Shape mismatch between operands.
    ShapeMismatch { context: &'static str },
    /// Gradient tape was asked about a parameter it does not hold.
    UnknownParameter { name: String },
    /// Tape backward pass requires a 1x1 output node.
    NonScalarOutput { rows: usize, cols: usize },
    /// A value that must be finite was NaN or infinite.
    NonFinite { context: &'static str },
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericsError::NotPositiveDefinite { size, max_jitter } => write!(
                f,
                "matrix of size {size} is not positive definite even with jitter up to {max_jitter:e}"
            ),
            NumericsError::NonSquare { rows, cols } => {
                write!(f, "expected a square matrix, got {rows}x{cols}")
            }
            NumericsError::ShapeMismatch { context } => write!(f, "shape mismatch in {context}"),
            NumericsError::UnknownParameter { name } => {
                write!(f, "gradient tape holds no parameter named '{name}'")
            }
            NumericsError::NonScalarOutput { rows, cols } => {
                write!(f, "backward pass requires a 1x1 output, got {rows}x{cols}")
            }
            NumericsError::NonFinite { context } => {
                write!(f, "non-finite value encountered in {context}")
            }
        }
    }
}

impl Error for NumericsError {}

/// Row-wise softmax with max subtraction.
///
/// Every output row sums to one and stays finite for any finite input; a row
/// of equal entries maps to the uniform distribution.
pub fn softmax_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// SplitMix64 mixing step: a cheap, well-distributed hash from one `u64` to
/// another, used to derive independent RNG sub-seeds from a master seed.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Relative jitter ladder applied when a Cholesky factorization fails:
/// `JITTER_INITIAL * mean(diag)` escalating tenfold up to
/// `JITTER_MAX * mean(diag)`.
pub const JITTER_INITIAL: f64 = 1e-8;
pub const JITTER_MAX: f64 = 1e-2;

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
///
/// Fails with [`NumericsError::NotPositiveDefinite`] when a pivot falls below
/// the relative floor; callers wanting the jitter policy use
/// [`cholesky_with_jitter`].
pub fn cholesky<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::NonSquare { rows: a.rows(), cols: a.cols() });
    }
    let n = a.rows();
    let mean_diag = (0..n).map(|i| a[(i, i)].abs()).sum::<T>() / T::from_real(n.max(1) as f64);
    // Pivots this close to zero (relative to scale) produce solves dominated
    // by rounding noise, so they are treated as factorization failures.
    let floor = mean_diag * T::epsilon() * T::from_real(16.0);
    let mut l = Matrix::<T>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d.is_finite() && d > floor) {
            return Err(NumericsError::NotPositiveDefinite { size: n, max_jitter: 0.0 });
        }
        let diag = d.sqrt();
        l[(j, j)] = diag;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / diag;
        }
    }
    Ok(l)
}

/// Cholesky factorization with escalating diagonal jitter.
///
/// On failure, `JITTER_INITIAL * mean(diag)` is added to the diagonal and the
/// factorization retried, escalating tenfold per attempt up to
/// `JITTER_MAX * mean(diag)`. Returns the factor and the absolute jitter that
/// was added (zero when the plain factorization succeeded).
pub fn cholesky_with_jitter<T: Scalar>(a: &Matrix<T>) -> Result<(Matrix<T>, T), NumericsError> {
    if !a.is_square() {
        return Err(NumericsError::NonSquare { rows: a.rows(), cols: a.cols() });
    }
    if let Ok(l) = cholesky(a) {
        return Ok((l, T::zero()));
    }
    let n = a.rows();
    let mean_diag = (0..n).map(|i| a[(i, i)].abs()).sum::<T>() / T::from_real(n.max(1) as f64);
    let mut level = T::from_real(JITTER_INITIAL);
    let max_level = T::from_real(JITTER_MAX);
    while level <= max_level * (T::one() + T::epsilon()) {
        let jitter = level * mean_diag;
        let mut jittered = a.clone();
        for i in 0..n {
            jittered[(i, i)] += jitter;
        }
        if let Ok(l) = cholesky(&jittered) {
            return Ok((l, jitter));
        }
        level *= T::from_real(10.0);
    }
    Err(NumericsError::NotPositiveDefinite {
        size: n,
        max_jitter: (max_level * mean_diag).to_real(),
    })
}

/// Solve `L y = b` for lower-triangular `L` (forward substitution).
pub fn solve_lower<T: Scalar>(l: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(l.rows(), b.rows(), "solve_lower shape mismatch");
    let (n, m) = (l.rows(), b.cols());
    let mut x = b.clone();
    for i in 0..n {
        for k in 0..i {
            let lik = l[(i, k)];
            if lik == T::zero() {
                continue;
            }
            let (head, tail) = x.data_mut().split_at_mut(i * m);
            let xk = &head[k * m..(k + 1) * m];
            let xi = &mut tail[..m];
            for j in 0..m {
                xi[j] -= lik * xk[j];
            }
        }
        let diag = l[(i, i)];
        for j in 0..m {
            x[(i, j)] /= diag;
        }
    }
    x
}

/// Solve `L^T x = b` for lower-triangular `L` (back substitution).
pub fn solve_lower_transpose<T: Scalar>(l: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    assert_eq!(l.rows(), b.rows(), "solve_lower_transpose shape mismatch");
    let (n, m) = (l.rows(), b.cols());
    let mut x = b.clone();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[(k, i)];
            if lki == T::zero() {
                continue;
            }
            for j in 0..m {
                let v = x[(k, j)];
                x[(i, j)] -= lki * v;
            }
        }
        let diag = l[(i, i)];
        for j in 0..m {
            x[(i, j)] /= diag;
        }
    }
    x
}

/// Solve `a x = b` for symmetric positive definite `a` via Cholesky with the
/// jitter policy, returning the solution and `log|a|` of the factorized
/// (possibly jittered) matrix.
pub fn cholesky_solve<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
) -> Result<(Matrix<T>, T), NumericsError> {
    if a.rows() != b.rows() {
        return Err(NumericsError::ShapeMismatch { context: "cholesky_solve rhs" });
    }
    let (l, _jitter) = cholesky_with_jitter(a)?;
    let y = solve_lower(&l, b);
    let x = solve_lower_transpose(&l, &y);
    Ok((x, log_det_from_factor(&l)))
}

/// `log|a|` from its Cholesky factor: twice the sum of log-diagonal entries.
pub fn log_det_from_factor<T: Scalar>(l: &Matrix<T>) -> T {
    let mut acc = T::zero();
    for i in 0..l.rows() {
        acc += l[(i, i)].ln();
    }
    acc + acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
    }

    #[test]
    fn softmax_uniform_on_equal_entries() {
        let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![7.5, 7.5]]);
        let s = softmax_rows(&x);
        for &v in s.data() {
            assert_close(v, 0.5, 1e-15, "uniform softmax");
        }
    }

    #[test]
    fn softmax_frozen_log_two_case() {
        // exp(ln 2) = 2 against exp(0) = 1 gives weights 2/3 and 1/3.
        let x = Matrix::from_rows(&[vec![(2.0f64).ln(), 0.0]]);
        let s = softmax_rows(&x);
        assert_close(s[(0, 0)], 2.0 / 3.0, 1e-15, "softmax ln2 first");
        assert_close(s[(0, 1)], 1.0 / 3.0, 1e-15, "softmax ln2 second");
    }

    #[test]
    fn softmax_survives_large_magnitudes() {
        let x = Matrix::from_rows(&[vec![1000.0, 1000.0]]);
        let s = softmax_rows(&x);
        assert!(s.all_finite());
        assert_close(s[(0, 0)], 0.5, 1e-15, "large-entry softmax");
    }

    #[test]
    fn cholesky_frozen_factor() {
        // [[4,12],[12,37]] factors as [[2,0],[6,1]].
        let a = Matrix::from_rows(&[vec![4.0, 12.0], vec![12.0, 37.0]]);
        let l = cholesky(&a).unwrap();
        assert_eq!(l.data(), &[2.0, 0.0, 6.0, 1.0]);
    }

    #[test]
    fn cholesky_solve_frozen_log_det() {
        // det([[4,2],[2,3]]) = 8; inverse applied to [1,1] gives [1/8, 1/4].
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let b = Matrix::col_vec(&[1.0, 1.0]);
        let (x, log_det) = cholesky_solve(&a, &b).unwrap();
        assert_close(x[(0, 0)], 0.125, 1e-14, "solve x0");
        assert_close(x[(1, 0)], 0.25, 1e-14, "solve x1");
        assert_close(log_det, (8.0f64).ln(), 1e-14, "log det");
    }

    #[test]
    fn log_det_consistent_with_diagonal_product() {
        let a = Matrix::from_rows(&[
            vec![6.0, 2.0, 1.0],
            vec![2.0, 5.0, 2.0],
            vec![1.0, 2.0, 4.0],
        ]);
        let l = cholesky(&a).unwrap();
        let mut prod = 1.0;
        for i in 0..3 {
            prod *= l[(i, i)] * l[(i, i)];
        }
        let log_det: f64 = log_det_from_factor(&l);
        assert!((log_det.exp() - prod).abs() / prod <= 1e-10, "exp(log_det) vs product");
    }

    #[test]
    fn indefinite_matrix_is_rejected_even_with_jitter() {
        // Eigenvalues -1 and 2: the jitter cap (1e-2 of mean diagonal) cannot
        // lift the negative eigenvalue above zero.
        let a = Matrix::from_rows(&[vec![-1.0, 0.0], vec![0.0, 2.0]]);
        match cholesky_with_jitter(&a) {
            Err(NumericsError::NotPositiveDefinite { .. }) => {}
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn rank_deficient_matrix_succeeds_via_jitter() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let (l, jitter) = cholesky_with_jitter(&a).unwrap();
        assert!(jitter > 0.0, "jitter must have been applied");
        assert!(l.all_finite());
    }

    #[test]
    fn non_square_is_rejected() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(cholesky(&a), Err(NumericsError::NonSquare { .. })));
    }

    #[test]
    fn triangular_solves_work_in_single_precision() {
        let a = Matrix::<f32>::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let b = Matrix::col_vec(&[1.0f32, 1.0]);
        let (x, _) = cholesky_solve(&a, &b).unwrap();
        assert!((x[(0, 0)] - 0.125).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_are_stochastic(values in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let x = Matrix::from_vec(3, 4, values);
            let s = softmax_rows(&x);
            for i in 0..3 {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn cholesky_solve_residual_is_small(values in proptest::collection::vec(-1.0f64..1.0, 16), rhs in proptest::collection::vec(-1.0f64..1.0, 4)) {
            // a = g g^T + n I is symmetric positive definite by construction.
            let g = Matrix::from_vec(4, 4, values);
            let mut a = g.matmul_nt(&g);
            for i in 0..4 {
                a[(i, i)] += 4.0;
            }
            let b = Matrix::col_vec(&rhs);
            let (x, _) = cholesky_solve(&a, &b).unwrap();
            let residual = a.matmul(&x).sub(&b).norm();
            let scale = b.norm().max(1e-12);
            prop_assert!(residual / scale <= 1e-8);
        }
    }
}
