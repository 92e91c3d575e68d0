//! Dense small-matrix kernels shared by every other module.
//!
//! Everything here is a pure function over [`Matrix`] / [`Vector`]
//! (thin aliases over `nalgebra`'s dynamically sized types). The kernels are
//! the quadratic retraction `h(M) = I + M + ½M²`, a scaling-and-squaring
//! matrix exponential, upper/lower Cholesky factorizations, triangular
//! solves and a handful of predicates used by the structured code paths.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SngdError};

/// Dense real matrix.
pub type Matrix = DMatrix<f64>;
/// Dense real column vector.
pub type Vector = DVector<f64>;

/// Which system a triangular solve addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    /// Solve `T x = b`.
    No,
    /// Solve `Tᵀ x = b`.
    Yes,
}

fn require_square(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(SngdError::Dimension(format!(
            "{what}: expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// The quadratic retraction `h(M) = I + M + ½M²`.
pub fn h_map(m: &Matrix) -> Result<Matrix> {
    require_square(m, "h_map")?;
    let n = m.nrows();
    let mut out = m * m * 0.5 + m;
    for i in 0..n {
        out[(i, i)] += 1.0;
    }
    Ok(out)
}

/// Taylor order used after scaling; with `‖M/2ˢ‖₁ ≤ ½` the truncation error
/// of an order-18 series is far below double-precision round-off.
const EXP_TAYLOR_ORDER: usize = 18;

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
///
/// The input is scaled by `2⁻ˢ` until its 1-norm is at most ½, the series is
/// summed to order 18 and the result squared `s` times.
pub fn mat_exp(m: &Matrix) -> Result<Matrix> {
    require_square(m, "mat_exp")?;
    if m.iter().any(|x| !x.is_finite()) {
        return Err(SngdError::Numerical("mat_exp: non-finite input".into()));
    }
    let n = m.nrows();
    let norm1 = (0..n)
        .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let mut squarings = 0u32;
    if norm1 > 0.5 {
        squarings = (norm1 / 0.5).log2().ceil() as u32;
    }
    let scaled = m / 2f64.powi(squarings as i32);
    let mut result = Matrix::identity(n, n);
    let mut term = Matrix::identity(n, n);
    for k in 1..=EXP_TAYLOR_ORDER {
        term = &term * &scaled / k as f64;
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

/// Upper-triangular Cholesky factor: returns `U` upper triangular with a
/// positive diagonal such that `U Uᵀ = S`.
///
/// This is the "reverse" factorization (not `UᵀU`), obtained by eliminating
/// from the last row/column backwards.
pub fn chol_upper(s: &Matrix) -> Result<Matrix> {
    require_square(s, "chol_upper")?;
    let n = s.nrows();
    let mut u = Matrix::zeros(n, n);
    for j in (0..n).rev() {
        let mut d = s[(j, j)];
        for k in (j + 1)..n {
            d -= u[(j, k)] * u[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(SngdError::NotPositiveDefinite { pivot: j });
        }
        let ujj = d.sqrt();
        u[(j, j)] = ujj;
        for i in 0..j {
            let mut v = s[(i, j)];
            for k in (j + 1)..n {
                v -= u[(i, k)] * u[(j, k)];
            }
            u[(i, j)] = v / ujj;
        }
    }
    Ok(u)
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = S`.
pub fn chol_lower(s: &Matrix) -> Result<Matrix> {
    require_square(s, "chol_lower")?;
    let n = s.nrows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(SngdError::NotPositiveDefinite { pivot: j });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut v = s[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

fn is_upper(t: &Matrix) -> bool {
    (0..t.nrows()).all(|i| (0..i.min(t.ncols())).all(|j| t[(i, j)] == 0.0))
}

fn is_lower(t: &Matrix) -> bool {
    (0..t.nrows()).all(|i| ((i + 1)..t.ncols()).all(|j| t[(i, j)] == 0.0))
}

/// Solves `T x = b` (or `Tᵀ x = b`) for a triangular `T` by forward or
/// backward substitution. Whether `T` is upper or lower triangular is read off
/// its zero pattern; a diagonal matrix is treated as upper triangular.
pub fn tri_solve(t: &Matrix, b: &Vector, transpose: Transpose) -> Result<Vector> {
    require_square(t, "tri_solve")?;
    let n = t.nrows();
    if b.len() != n {
        return Err(SngdError::Dimension(format!(
            "tri_solve: matrix is {n}x{n} but right-hand side has length {}",
            b.len()
        )));
    }
    if let Some(i) = (0..n).find(|&i| t[(i, i)] == 0.0) {
        return Err(SngdError::Singular(format!("tri_solve: zero diagonal entry at {i}")));
    }
    let upper = if is_upper(t) {
        true
    } else if is_lower(t) {
        false
    } else {
        return Err(SngdError::Dimension("tri_solve: matrix is not triangular".into()));
    };
    // Solving with Tᵀ flips the effective triangle.
    let effective_upper = upper ^ (transpose == Transpose::Yes);
    let at = |i: usize, j: usize| match transpose {
        Transpose::No => t[(i, j)],
        Transpose::Yes => t[(j, i)],
    };
    let mut x = b.clone();
    if effective_upper {
        for i in (0..n).rev() {
            let mut v = x[i];
            for j in (i + 1)..n {
                v -= at(i, j) * x[j];
            }
            x[i] = v / at(i, i);
        }
    } else {
        for i in 0..n {
            let mut v = x[i];
            for j in 0..i {
                v -= at(i, j) * x[j];
            }
            x[i] = v / at(i, i);
        }
    }
    Ok(x)
}

/// Symmetric part `½(X + Xᵀ)`.
pub fn sym(x: &Matrix) -> Matrix {
    (x + x.transpose()) * 0.5
}

/// Largest absolute asymmetry `max |X_ij − X_ji|`.
pub fn asymmetry(x: &Matrix) -> f64 {
    let n = x.nrows().min(x.ncols());
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((x[(i, j)] - x[(j, i)]).abs());
        }
    }
    worst
}

/// True when `X` is square and `|X_ij − X_ji| ≤ tol·max(1, max|X|)`.
pub fn is_symmetric(x: &Matrix, tol: f64) -> bool {
    x.nrows() == x.ncols() && asymmetry(x) <= tol * x.amax().max(1.0)
}

/// True when `X` is symmetric and admits a Cholesky factorization.
pub fn is_spd(x: &Matrix) -> bool {
    is_symmetric(x, 1e-10) && chol_lower(x).is_ok()
}

/// `log det S` for a symmetric positive-definite `S`.
pub fn logdet_spd(s: &Matrix) -> Result<f64> {
    let l = chol_lower(s)?;
    Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn inv_spd(s: &Matrix) -> Result<Matrix> {
    let n = s.nrows();
    let chol = nalgebra::Cholesky::new(s.clone())
        .ok_or(SngdError::NotPositiveDefinite { pivot: n })?;
    Ok(chol.inverse())
}

/// Dense inverse of a general square matrix (LU with partial pivoting).
pub fn inv_dense(m: &Matrix) -> Result<Matrix> {
    require_square(m, "inv_dense")?;
    m.clone()
        .try_inverse()
        .ok_or_else(|| SngdError::Singular("inv_dense: matrix is singular".into()))
}

/// Central finite-difference step `1e-5·max(1, |x|)` used by every numeric check.
pub fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Frobenius norm, an upper bound for the spectral norm.
pub fn frobenius(m: &Matrix) -> f64 {
    m.norm()
}

/// Kronecker product `A ⊗ B`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// Column-major vectorization `vec(X)`.
pub fn vec_of(x: &Matrix) -> Vector {
    Vector::from_column_slice(x.as_slice())
}

/// Inverse of [`vec_of`]: reshapes a length-`r·c` vector into `r × c`.
pub fn mat_of(v: &Vector, rows: usize, cols: usize) -> Matrix {
    Matrix::from_column_slice(rows, cols, v.as_slice())
}

/// Builds a matrix from row-major nested vectors.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(SngdError::Dimension("ragged rows".into()));
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Row-major nested vectors of a matrix (used for JSON output).
pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Serde adapter storing a [`Vector`] as a plain JSON array.
pub mod serde_vector {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Serde adapter storing a [`Matrix`] as row-major nested JSON arrays.
pub mod serde_matrix {
    use super::{from_rows, to_rows, Matrix};
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        from_rows(&Vec::<Vec<f64>>::deserialize(d)?).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn h_of_zero_is_identity() {
        assert_eq!(h_map(&Matrix::zeros(3, 3)).unwrap(), Matrix::identity(3, 3));
    }

    #[test]
    fn h_of_minus_one_scalar() {
        assert_eq!(h_map(&m(&[&[-1.0]])).unwrap()[(0, 0)], 0.5);
    }

    #[test]
    fn h_of_symmetric_matches_half_identity_plus_square() {
        let a = Matrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6);
        let s = sym(&a);
        let ipm = Matrix::identity(5, 5) + &s;
        let expect = (Matrix::identity(5, 5) + &ipm * ipm.transpose()) * 0.5;
        assert!((h_map(&s).unwrap() - expect).amax() < 1e-14);
    }

    #[test]
    fn h_rejects_non_square() {
        assert!(matches!(h_map(&Matrix::zeros(2, 3)), Err(SngdError::Dimension(_))));
    }

    #[test]
    fn exp_examples() {
        assert_eq!(mat_exp(&Matrix::zeros(4, 4)).unwrap(), Matrix::identity(4, 4));
        let d = mat_exp(&Matrix::from_diagonal(&Vector::from_vec(vec![0.3, -2.0]))).unwrap();
        assert!((d[(0, 0)] - 0.3f64.exp()).abs() < 1e-15);
        assert!((d[(1, 1)] - (-2.0f64).exp()).abs() < 1e-15);
        assert_eq!(d[(0, 1)], 0.0);
        let e = mat_exp(&m(&[&[0.1]])).unwrap()[(0, 0)];
        assert!((e - 1.105170918075647).abs() < 1e-15);
    }

    #[test]
    fn exp_of_large_diagonal_is_relatively_accurate() {
        let d = mat_exp(&Matrix::from_diagonal(&Vector::from_vec(vec![10.0, -10.0, 7.5]))).unwrap();
        for (i, x) in [10.0f64, -10.0, 7.5].iter().enumerate() {
            assert!((d[(i, i)] / x.exp() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exp_of_rotation_generator() {
        let t = 2.5;
        let e = mat_exp(&m(&[&[0.0, -t], &[t, 0.0]])).unwrap();
        let expect = m(&[&[t.cos(), -t.sin()], &[t.sin(), t.cos()]]);
        assert!((e - expect).amax() < 1e-14);
    }

    #[test]
    fn exp_and_h_agree_to_second_order() {
        let base = Matrix::from_fn(4, 4, |i, j| ((i + 2 * j) as f64).sin());
        let err = |s: f64| {
            let x = &base * s;
            (mat_exp(&x).unwrap() - h_map(&x).unwrap()).norm()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((ratio - 8.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn logdet_of_h_has_identity_gradient_at_zero() {
        let n = 3;
        for a in 0..n {
            for b in 0..n {
                let step = fd_step(0.0);
                let f = |s: f64| {
                    let mut x = Matrix::zeros(n, n);
                    x[(a, b)] = s;
                    h_map(&x).unwrap().determinant().ln()
                };
                let g = (f(step) - f(-step)) / (2.0 * step);
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((g - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn chol_upper_examples() {
        assert_eq!(chol_upper(&Matrix::identity(3, 3)).unwrap(), Matrix::identity(3, 3));
        let u = chol_upper(&m(&[&[5.0, 3.0], &[3.0, 9.0]])).unwrap();
        assert!((u.clone() - m(&[&[2.0, 1.0], &[0.0, 3.0]])).amax() < 1e-15);
        assert!((&u * u.transpose() - m(&[&[5.0, 3.0], &[3.0, 9.0]])).amax() < 1e-14);
        let u = chol_upper(&m(&[&[4.0, 0.0], &[0.0, 9.0]])).unwrap();
        assert_eq!(u, m(&[&[2.0, 0.0], &[0.0, 3.0]]));
    }

    #[test]
    fn chol_upper_reports_failing_pivot() {
        let err = chol_upper(&m(&[&[1.0, 2.0], &[2.0, -1.0]])).unwrap_err();
        assert!(matches!(err, SngdError::NotPositiveDefinite { pivot: 1 }));
    }

    #[test]
    fn chol_upper_is_unique() {
        let u = m(&[&[1.5, -0.2, 0.7], &[0.0, 0.9, 0.4], &[0.0, 0.0, 2.2]]);
        let s = &u * u.transpose();
        assert!((chol_upper(&s).unwrap() - u).amax() < 1e-13);
    }

    #[test]
    fn tri_solve_examples() {
        let b = Vector::from_vec(vec![1.0, 2.0]);
        assert_eq!(tri_solve(&Matrix::identity(2, 2), &b, Transpose::No).unwrap(), b);
        let t = m(&[&[2.0, 1.0], &[0.0, 3.0]]);
        let x = tri_solve(&t, &Vector::from_vec(vec![5.0, 3.0]), Transpose::No).unwrap();
        assert_eq!(x, Vector::from_vec(vec![2.0, 1.0]));
        // Tᵀ = [[2,0],[1,3]]: x₁ = 1, then x₂ = (5 − 1)/3.
        let b = Vector::from_vec(vec![2.0, 5.0]);
        let x = tri_solve(&t, &b, Transpose::Yes).unwrap();
        assert!((x - Vector::from_vec(vec![1.0, 4.0 / 3.0])).amax() < 1e-15);
        assert!((t.transpose() * tri_solve(&t, &b, Transpose::Yes).unwrap() - b).amax() < 1e-15);
    }

    #[test]
    fn tri_solve_lower_and_errors() {
        let t = m(&[&[2.0, 0.0], &[1.0, 4.0]]);
        let x = Vector::from_vec(vec![0.5, -1.25]);
        let b = &t * &x;
        assert!((tri_solve(&t, &b, Transpose::No).unwrap() - &x).amax() < 1e-15);
        let bt = t.transpose() * &x;
        assert!((tri_solve(&t, &bt, Transpose::Yes).unwrap() - &x).amax() < 1e-15);
        assert!(matches!(
            tri_solve(&m(&[&[0.0, 1.0], &[0.0, 1.0]]), &x, Transpose::No),
            Err(SngdError::Singular(_))
        ));
    }

    #[test]
    fn kron_and_vec_are_consistent() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let x = m(&[&[0.5, -1.0, 2.0], &[1.5, 0.0, 1.0]]);
        let b = m(&[&[2.0, 0.0, 1.0], &[1.0, 1.0, 0.0], &[0.0, 3.0, 1.0]]);
        // vec(A X B) = (Bᵀ ⊗ A) vec(X)
        let lhs = vec_of(&(&a * &x * &b));
        let rhs = kron(&b.transpose(), &a) * vec_of(&x);
        assert!((lhs - rhs).amax() < 1e-13);
        assert_eq!(mat_of(&vec_of(&x), 2, 3), x);
    }
}
