//! Shared numerical primitives: trapezoid quadrature, linear interpolation on
//! uniform grids, monotone table inversion, and small dense-matrix helpers.
//!
//! Everything in this crate discretizes coefficient functions as tables on
//! uniform grids and integrates with the (composite or product) trapezoidal
//! rule, so these helpers are deliberately simple and allocation-light.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Composite trapezoid weight for node `i` of `len` nodes (1/2 at the ends,
/// 1 in the interior). `len == 1` integrates to zero, handled by the callers.
#[inline]
pub fn trapezoid_weight(i: usize, len: usize) -> f64 {
    if len < 2 {
        0.0
    } else if i == 0 || i + 1 == len {
        0.5
    } else {
        1.0
    }
}

/// Composite trapezoid integral of samples `f` with uniform spacing `h`.
///
/// # Example
///
/// ```
/// use hypctrl::numerics::trapezoid;
/// let f: Vec<f64> = (0..=100).map(|i| (i as f64 / 100.0).powi(2)).collect();
/// let integral = trapezoid(&f, 0.01);
/// assert!((integral - 1.0 / 3.0).abs() < 1e-4);
/// ```
pub fn trapezoid(f: &[f64], h: f64) -> f64 {
    if f.len() < 2 {
        return 0.0;
    }
    let interior: f64 = f[1..f.len() - 1].iter().sum();
    h * (0.5 * (f[0] + f[f.len() - 1]) + interior)
}

/// Cumulative trapezoid integral: `out[k] = ∫_{x_0}^{x_k} f dx` on a uniform
/// grid with spacing `h` (`out[0] = 0`).
pub fn cumulative_trapezoid(f: &[f64], h: f64) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    for k in 1..f.len() {
        out[k] = out[k - 1] + 0.5 * h * (f[k - 1] + f[k]);
    }
    out
}

/// A function sampled on a uniform grid over `[a, b]`, evaluated elsewhere by
/// linear interpolation (clamped at the ends).
#[derive(Debug, Clone)]
pub struct UniformTable {
    a: f64,
    h: f64,
    values: Vec<f64>,
}

impl UniformTable {
    /// Builds a table from samples on the uniform grid `a, a+h, …, b`.
    pub fn new(a: f64, b: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid_input("uniform table needs >= 2 samples"));
        }
        if !(b > a) || !a.is_finite() || !b.is_finite() {
            return Err(Error::invalid_input("uniform table needs a finite range"));
        }
        let h = (b - a) / (values.len() - 1) as f64;
        Ok(Self { a, h, values })
    }

    /// Samples `f` on `n + 1` uniform nodes over `[a, b]`.
    pub fn sample(a: f64, b: f64, n: usize, mut f: impl FnMut(f64) -> f64) -> Result<Self> {
        let h = (b - a) / n as f64;
        let values = (0..=n).map(|i| f(a + h * i as f64)).collect();
        Self::new(a, b, values)
    }

    /// Grid spacing.
    #[inline]
    pub fn step(&self) -> f64 {
        self.h
    }

    /// Left end of the range.
    #[inline]
    pub fn start(&self) -> f64 {
        self.a
    }

    /// Right end of the range.
    #[inline]
    pub fn end(&self) -> f64 {
        self.a + self.h * (self.values.len() - 1) as f64
    }

    /// The raw samples.
    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Linear interpolation at `x`, clamped to the table range.
    pub fn eval(&self, x: f64) -> f64 {
        interp_uniform(self.a, self.h, &self.values, x)
    }
}

/// Linear interpolation of uniformly spaced samples (`values[i]` at
/// `a + i*h`), clamped to the sampled range.
#[inline]
pub fn interp_uniform(a: f64, h: f64, values: &[f64], x: f64) -> f64 {
    debug_assert!(values.len() >= 2);
    let s = (x - a) / h;
    if s <= 0.0 {
        return values[0];
    }
    let last = values.len() - 1;
    if s >= last as f64 {
        return values[last];
    }
    let i = s as usize;
    let w = s - i as f64;
    values[i] * (1.0 - w) + values[i + 1] * w
}

/// The inverse of a strictly increasing function given by uniform samples.
///
/// The forward table maps `x_i = a + i*h ↦ y_i`; the inverse is resampled on
/// a fine uniform grid in `y` so that evaluations stay O(1). Node values are
/// reproduced exactly up to interpolation of the piecewise-linear forward map.
#[derive(Debug, Clone)]
pub struct MonotoneInverse {
    table: UniformTable,
}

impl MonotoneInverse {
    /// Builds the inverse of `y_values[i]` at `x = a + i*h`. `refine` extra
    /// subdivisions per source interval keep inverse interpolation error
    /// subordinate to the forward table's own resolution.
    pub fn new(a: f64, h: f64, y_values: &[f64], refine: usize) -> Result<Self> {
        if y_values.len() < 2 {
            return Err(Error::invalid_input("inverse table needs >= 2 samples"));
        }
        if y_values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid_input(
                "inverse table requires strictly increasing samples",
            ));
        }
        let n_fine = (y_values.len() - 1) * refine.max(1);
        let y0 = y_values[0];
        let y1 = y_values[y_values.len() - 1];
        let hy = (y1 - y0) / n_fine as f64;
        let mut values = Vec::with_capacity(n_fine + 1);
        // March the fine y-grid through the sorted forward samples.
        let mut seg = 0usize;
        for j in 0..=n_fine {
            let y = if j == n_fine { y1 } else { y0 + hy * j as f64 };
            while seg + 2 < y_values.len() && y_values[seg + 1] < y {
                seg += 1;
            }
            let w = (y - y_values[seg]) / (y_values[seg + 1] - y_values[seg]);
            values.push(a + h * (seg as f64 + w.clamp(0.0, 1.0)));
        }
        Ok(Self {
            table: UniformTable::new(y0, y1, values)?,
        })
    }

    /// Evaluates the inverse at `y` (clamped to the forward range).
    #[inline]
    pub fn eval(&self, y: f64) -> f64 {
        self.table.eval(y)
    }

    /// Domain of the inverse = range of the forward map.
    pub fn domain(&self) -> (f64, f64) {
        (self.table.start(), self.table.end())
    }
}

/// Matrix exponential `exp(m)` by scaling and squaring with a Taylor core.
///
/// Sized for the small (n ≤ ~6) ODE blocks this crate works with; accuracy is
/// near machine precision there.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "expm needs a square matrix");
    if n == 0 {
        return m.clone();
    }
    let norm = m.amax() * n as f64;
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = m / f64::powi(2.0, squarings as i32);
    // Taylor series of the scaled matrix; ||scaled|| <= 0.5 so ~20 terms reach
    // machine precision.
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=24 {
        term = (&term * &scaled) / k as f64;
        result += &term;
        if term.amax() < 1e-300 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Coefficients of the characteristic polynomial `det(sI − m) = s^n + c_{n−1}
/// s^{n−1} + … + c_0`, returned as `[c_0, …, c_{n−1}]` (Faddeev–LeVerrier).
pub fn characteristic_polynomial(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    assert_eq!(
        n,
        m.ncols(),
        "characteristic polynomial needs a square matrix"
    );
    let mut coeffs = vec![0.0; n];
    let mut aux = DMatrix::<f64>::identity(n, n);
    for k in 1..=n {
        aux = m * aux;
        let c = -aux.trace() / k as f64;
        if k < n {
            for i in 0..n {
                aux[(i, i)] += c;
            }
        }
        coeffs[n - k] = c;
    }
    coeffs
}

/// Evaluates the monic polynomial `s^n + coeffs[n−1] s^{n−1} + … + coeffs[0]`
/// at the matrix `m` (`coeffs` as from [`characteristic_polynomial`]).
pub fn monic_polyval_matrix(coeffs: &[f64], m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::<f64>::identity(n, n);
    // Horner: ((I*m + c_{n-1} I)*m + ...) + c_0 I
    for &c in coeffs.iter().rev() {
        out = &out * m;
        for i in 0..n {
            out[(i, i)] += c;
        }
    }
    out
}

/// `factorial(k)` as f64; exact for the small k used in series weights.
#[inline]
pub fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |acc, i| acc * i as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    #[test]
    fn trapezoid_matches_analytic_integral() {
        let n = 200;
        let h = std::f64::consts::PI / n as f64;
        let f: Vec<f64> = (0..=n).map(|i| (h * i as f64).sin()).collect();
        assert_relative_eq!(trapezoid(&f, h), 2.0, epsilon = 1e-3);
    }

    #[test]
    fn cumulative_trapezoid_endpoints() {
        let f = vec![1.0, 2.0, 3.0];
        let c = cumulative_trapezoid(&f, 0.5);
        assert_eq!(c[0], 0.0);
        assert_relative_eq!(c[2], 0.5 * (1.5 + 2.5), epsilon = 1e-15);
    }

    #[test]
    fn interpolation_hits_nodes_and_midpoints() {
        let t = UniformTable::new(0.0, 1.0, vec![0.0, 1.0, 4.0]).unwrap();
        assert_relative_eq!(t.eval(0.5), 1.0, epsilon = 1e-15);
        assert_relative_eq!(t.eval(0.75), 2.5, epsilon = 1e-15);
        // clamping
        assert_relative_eq!(t.eval(-1.0), 0.0, epsilon = 1e-15);
        assert_relative_eq!(t.eval(2.0), 4.0, epsilon = 1e-15);
    }

    #[test]
    fn monotone_inverse_round_trips() {
        // y = x^2 + x on [0, 2], strictly increasing.
        let n = 400;
        let h = 2.0 / n as f64;
        let y: Vec<f64> = (0..=n)
            .map(|i| {
                let x = h * i as f64;
                x * x + x
            })
            .collect();
        let inv = MonotoneInverse::new(0.0, h, &y, 4).unwrap();
        for &x in &[0.0, 0.31, 1.0, 1.77, 2.0] {
            let yx = x * x + x;
            assert_relative_eq!(inv.eval(yx), x, epsilon = 1e-4);
        }
    }

    #[test]
    fn monotone_inverse_rejects_non_monotone() {
        assert!(MonotoneInverse::new(0.0, 1.0, &[0.0, 1.0, 0.5], 2).is_err());
    }

    #[test]
    fn expm_matches_series_for_nilpotent_and_diagonal() {
        // Nilpotent: exp([[0,1],[0,0]]) = [[1,1],[0,1]] exactly.
        let n = dmatrix![0.0, 1.0; 0.0, 0.0];
        let e = expm(&n);
        assert_relative_eq!(e[(0, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(e[(0, 1)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(e[(1, 0)], 0.0, epsilon = 1e-14);
        // Diagonal: exp(diag(a, b)).
        let d = dmatrix![0.3, 0.0; 0.0, -1.7];
        let e = expm(&d);
        assert_relative_eq!(e[(0, 0)], 0.3f64.exp(), epsilon = 1e-13);
        assert_relative_eq!(e[(1, 1)], (-1.7f64).exp(), epsilon = 1e-13);
    }

    #[test]
    fn expm_group_property() {
        let m = dmatrix![0.2, 1.3; -0.7, 0.4];
        let double = expm(&(2.0 * &m));
        let single = expm(&m);
        let squared = &single * &single;
        assert!((double - squared).amax() < 1e-12);
    }

    #[test]
    fn characteristic_polynomial_of_companion() {
        // Companion matrix of s^2 + 3 s + 2.
        let m = dmatrix![0.0, 1.0; -2.0, -3.0];
        let c = characteristic_polynomial(&m);
        assert_relative_eq!(c[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(c[1], 3.0, epsilon = 1e-12);
        // Cayley–Hamilton: p(M) = 0.
        let p = monic_polyval_matrix(&c, &m);
        assert!(p.amax() < 1e-12);
    }
}
