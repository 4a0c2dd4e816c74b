//! Polynomial least squares through the normal equations.
//!
//! For `N` samples `(x_n, y_n)` and degree `k` the coefficients
//! `a = [a_0 .. a_k]` solve the `(k+1) x (k+1)` system
//!
//! ```text
//! | N         ..  Σ x^k  |       | Σ y       |
//! | ..        ..  ..     | · a = | ..        |
//! | Σ x^k     ..  Σ x^2k |       | Σ y · x^k |
//! ```
//!
//! Abscissae are divided by `max |x|` before the power sums are accumulated
//! and the solution is rescaled afterwards, which keeps `Σ x^2k` bounded for
//! pixel-scale inputs.

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FitError {
    #[error("normal equations are singular: need {needed} distinct abscissae, have {distinct}")]
    SingularSystem { needed: usize, distinct: usize },
    #[error("sample coordinates must be finite")]
    NonFinite,
}

/// Coefficients `a_0 .. a_k`, lowest order first.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyCoeffs<T> {
    coeffs: Vec<T>,
}

impl<T: Scalar> PolyCoeffs<T> {
    /// # Panics
    /// On an empty coefficient list.
    pub fn new(coeffs: Vec<T>) -> Self {
        assert!(!coeffs.is_empty(), "a polynomial needs at least one coefficient");
        Self { coeffs }
    }

    pub fn zero(degree: usize) -> Self {
        Self { coeffs: vec![T::zero(); degree + 1] }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    /// Horner evaluation.
    #[inline]
    pub fn eval(&self, x: T) -> T {
        self.coeffs.iter().rev().fold(T::zero(), |acc, &a| acc * x + a)
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }
}

/// Solves `a · x = b` by Gaussian elimination with partial pivoting.
/// Returns `None` when a pivot vanishes relative to the matrix scale.
pub fn solve_linear<T: Scalar>(mut a: Vec<Vec<T>>, mut b: Vec<T>) -> Option<Vec<T>> {
    let n = b.len();
    debug_assert!(a.len() == n && a.iter().all(|r| r.len() == n));
    let scale = a.iter().flatten().fold(T::zero(), |m, v| m.max(v.abs()));
    if scale == T::zero() || !scale.is_finite() {
        return None;
    }
    let tiny = scale * T::epsilon() * T::of(n as f64);

    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[pivot][col].abs() <= tiny {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == T::zero() {
                continue;
            }
            for j in col..n {
                let v = a[col][j];
                a[row][j] = a[row][j] - f * v;
            }
            let v = b[col];
            b[row] = b[row] - f * v;
        }
    }

    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let s = (i + 1..n).fold(b[i], |s, j| s - a[i][j] * x[j]);
        x[i] = s / a[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Power-sum matrix and right-hand side, accumulated exactly as written
/// (no rescaling).
pub fn normal_equations<T: Scalar>(points: &[(T, T)], degree: usize) -> (Vec<Vec<T>>, Vec<T>) {
    let k = degree;
    let mut sums = vec![T::zero(); 2 * k + 1];
    let mut rhs = vec![T::zero(); k + 1];
    for &(x, y) in points {
        let mut p = T::one();
        for (j, s) in sums.iter_mut().enumerate() {
            *s = *s + p;
            if j <= k {
                rhs[j] = rhs[j] + y * p;
            }
            p = p * x;
        }
    }
    let matrix = (0..=k).map(|i| (0..=k).map(|j| sums[i + j]).collect()).collect();
    (matrix, rhs)
}

/// Backward-error style residual of `coeffs` against the unscaled normal
/// equations: `‖A a − b‖∞ / (‖A‖∞ ‖a‖∞ + ‖b‖∞)`.
pub fn normal_residual<T: Scalar>(points: &[(T, T)], coeffs: &PolyCoeffs<T>) -> T {
    let (a, b) = normal_equations(points, coeffs.degree());
    let c = coeffs.coeffs();
    let mut num = T::zero();
    let mut a_norm = T::zero();
    for (row, &bi) in a.iter().zip(&b) {
        let dot = row.iter().zip(c).fold(T::zero(), |s, (&aij, &cj)| s + aij * cj);
        num = num.max((dot - bi).abs());
        a_norm = a_norm.max(row.iter().fold(T::zero(), |s, v| s + v.abs()));
    }
    let c_norm = c.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let b_norm = b.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let den = a_norm * c_norm + b_norm;
    if den == T::zero() {
        num
    } else {
        num / den
    }
}

fn distinct_abscissae<T: Scalar>(points: &[(T, T)]) -> usize {
    let mut xs: Vec<T> = points.iter().map(|p| p.0).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup();
    xs.len()
}

/// Coefficient error measured in the `max |x|`-normalized basis:
/// `max_j |â_j − a_j| s^j / max_j |a_j| s^j`.
pub fn scaled_coefficient_error<T: Scalar>(fit: &PolyCoeffs<T>, truth: &PolyCoeffs<T>, s: T) -> T {
    let n = fit.coeffs.len().max(truth.coeffs.len());
    let get = |p: &PolyCoeffs<T>, j: usize| p.coeffs.get(j).copied().unwrap_or_else(T::zero);
    let (mut err, mut mag, mut pow) = (T::zero(), T::zero(), T::one());
    for j in 0..n {
        err = err.max((get(fit, j) - get(truth, j)).abs() * pow);
        mag = mag.max(get(truth, j).abs() * pow);
        pow = pow * s;
    }
    if mag == T::zero() {
        err
    } else {
        err / mag
    }
}

/// Least-squares polynomial of degree `degree` through `points`.
pub fn polyfit<T: Scalar>(points: &[(T, T)], degree: usize) -> Result<PolyCoeffs<T>, FitError> {
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(FitError::NonFinite);
    }
    let needed = degree + 1;
    let distinct = distinct_abscissae(points);
    if distinct < needed {
        return Err(FitError::SingularSystem { needed, distinct });
    }

    // Solve in t = (x - c) / h so the power sums stay on [-1, 1].
    let (lo, hi) = points.iter().fold((points[0].0, points[0].0), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    let two = T::of(2.0);
    let c = (lo + hi) / two;
    let h = (hi - lo) / two;
    let h = if h == T::zero() { T::one() } else { h };
    let scaled: Vec<(T, T)> = points.iter().map(|&(x, y)| ((x - c) / h, y)).collect();
    let (a, b) = normal_equations(&scaled, degree);
    let unit = solve_linear(a, b).ok_or(FitError::SingularSystem { needed, distinct })?;

    // Expand sum b_j ((x - c) / h)^j back into powers of x by Horner's rule.
    let mut coeffs = vec![T::zero(); needed];
    for (len, &bj) in unit.iter().enumerate().rev().map(|(j, b)| (needed - j, b)) {
        for i in (0..len).rev() {
            let lower = if i > 0 { coeffs[i - 1] } else { T::zero() };
            coeffs[i] = lower / h - coeffs[i] * c / h;
        }
        coeffs[0] = coeffs[0] + bj;
    }
    Ok(PolyCoeffs::new(coeffs))
}
