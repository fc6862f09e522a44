//! Volterra integral equations of the second kind,
//!
//! ```text
//! μ f(t) + ∫₀ᵗ k(t, s) f(s) ds = g(t),    t ∈ [0, T],
//! ```
//!
//! solved by forward substitution with product-trapezoid quadrature on a
//! uniform grid `t_j = j·h`:
//!
//! ```text
//! j = 0:   μ f₀ = g₀,
//! j ≥ 1:   (μ + (h/2) k(t_j, t_j)) f_j = g_j − h Σ_{i<j} w_i k(t_j, t_i) f_i,
//! ```
//!
//! with trapezoid weights `w₀ = 1/2`, `w_i = 1` otherwise. The scheme is
//! second-order accurate and exact at `t = 0`. Kernels are supplied by node
//! index (`kernel(j, i)` means `k(t_j, t_i)`), which keeps table-backed
//! kernels free of interpolation error; [`ConvolutionSolver`] is the fast
//! path for difference kernels `k(t, s) = k(t − s)` that are solved against
//! many right-hand sides with a single factorization.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid_input(
            "step size must be positive and finite",
        ));
    }
    Ok(())
}

/// Solves the scalar equation `μ f + ∫₀ᵗ k f ds = g` on the uniform grid
/// `t_j = j·h`, `j = 0..rhs.len()`.
///
/// `kernel(j, i)` evaluates `k(t_j, t_i)` for `i ≤ j`.
///
/// # Example
///
/// ```
/// // With k ≡ 0 the equation collapses to μ f = g.
/// let g: Vec<f64> = (0..10).map(|j| (j as f64) * 0.1).collect();
/// let f = hypctrl::volterra::solve_scalar(2.0, |_, _| 0.0, &g, 0.1).unwrap();
/// assert!((f[7] - g[7] / 2.0).abs() < 1e-15);
/// ```
pub fn solve_scalar(
    mu: f64,
    mut kernel: impl FnMut(usize, usize) -> f64,
    rhs: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    check_step(h)?;
    if rhs.is_empty() {
        return Err(Error::invalid_input("right-hand side is empty"));
    }
    if mu.abs() < f64::EPSILON {
        return Err(Error::numeric("volterra", "scalar multiplier μ is zero"));
    }
    let mut f = Vec::with_capacity(rhs.len());
    f.push(rhs[0] / mu);
    for j in 1..rhs.len() {
        let mut acc = rhs[j];
        for (i, &fi) in f.iter().enumerate() {
            let w = if i == 0 { 0.5 } else { 1.0 };
            acc -= h * w * kernel(j, i) * fi;
        }
        let lhs = mu + 0.5 * h * kernel(j, j);
        if lhs.abs() < 1e-14 * mu.abs().max(1.0) {
            return Err(Error::numeric(
                "volterra",
                format!("singular step multiplier at node {j}"),
            ));
        }
        f.push(acc / lhs);
    }
    Ok(f)
}

/// Solves `μ F + ∫₀ᵗ k F ds = G` with matrix multiplier `μ`, matrix-valued
/// kernel acting from the left, and matrix (or column-vector) unknowns.
///
/// All kernel values must be `n × n` where `n = mu.nrows()`; the right-hand
/// sides may have any common column count.
pub fn solve_matrices(
    mu: &DMatrix<f64>,
    mut kernel: impl FnMut(usize, usize) -> DMatrix<f64>,
    rhs: &[DMatrix<f64>],
    h: f64,
) -> Result<Vec<DMatrix<f64>>> {
    check_step(h)?;
    if rhs.is_empty() {
        return Err(Error::invalid_input("right-hand side is empty"));
    }
    let n = mu.nrows();
    if mu.ncols() != n || rhs.iter().any(|g| g.nrows() != n) {
        return Err(Error::invalid_input("dimension mismatch in matrix solve"));
    }
    let mu_lu = mu.clone().lu();
    let f0 = mu_lu
        .solve(&rhs[0])
        .ok_or_else(|| Error::numeric("volterra", "matrix multiplier μ is singular"))?;
    let mut f = Vec::with_capacity(rhs.len());
    f.push(f0);
    for j in 1..rhs.len() {
        let mut acc = rhs[j].clone();
        for (i, fi) in f.iter().enumerate() {
            let w = if i == 0 { 0.5 } else { 1.0 };
            acc -= h * w * kernel(j, i) * fi;
        }
        let lhs = mu + 0.5 * h * kernel(j, j);
        let fj = lhs.lu().solve(&acc).ok_or_else(|| {
            Error::numeric("volterra", format!("singular step multiplier at node {j}"))
        })?;
        f.push(fj);
    }
    Ok(f)
}

/// Pre-factorized solver for convolution kernels `k(t, s) = k(t − s)`.
///
/// The step multiplier `μ + (h/2) k(0)` is constant for difference kernels,
/// so its LU factorization is computed once and reused for every node and
/// every right-hand side. This is the inner loop of the delay-state
/// reconstruction, which solves the same two equations at every sample time.
#[derive(Debug, Clone)]
pub struct ConvolutionSolver {
    kernel: Vec<DMatrix<f64>>,
    h: f64,
    dim: usize,
    mu_lu: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    step_lu: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl ConvolutionSolver {
    /// Builds a solver for `μ f + ∫₀ᵗ k(t−s) f(s) ds = g` with
    /// `kernel[j] = k(j·h)`.
    pub fn new(mu: DMatrix<f64>, kernel: Vec<DMatrix<f64>>, h: f64) -> Result<Self> {
        check_step(h)?;
        let n = mu.nrows();
        if mu.ncols() != n || kernel.is_empty() || kernel.iter().any(|k| k.shape() != (n, n)) {
            return Err(Error::invalid_input(
                "convolution kernel entries must match the multiplier shape",
            ));
        }
        let step = &mu + 0.5 * h * &kernel[0];
        let mu_lu = mu.lu();
        let step_lu = step.lu();
        if !mu_lu.is_invertible() || !step_lu.is_invertible() {
            return Err(Error::numeric(
                "volterra",
                "convolution step multiplier is singular",
            ));
        }
        Ok(Self {
            kernel,
            h,
            dim: n,
            mu_lu,
            step_lu,
        })
    }

    /// Number of kernel nodes available (the maximal solvable length).
    #[inline]
    pub fn kernel_len(&self) -> usize {
        self.kernel.len()
    }

    /// Solves for `f` on the first `rhs.len()` nodes.
    pub fn solve(&self, rhs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        if rhs.is_empty() {
            return Err(Error::invalid_input("right-hand side is empty"));
        }
        if rhs.len() > self.kernel.len() {
            return Err(Error::invalid_input(
                "right-hand side is longer than the kernel table",
            ));
        }
        if rhs.iter().any(|g| g.len() != self.dim) {
            return Err(Error::invalid_input("dimension mismatch in matrix solve"));
        }
        let mut f = Vec::with_capacity(rhs.len());
        f.push(
            self.mu_lu
                .solve(&rhs[0])
                .ok_or_else(|| Error::numeric("volterra", "multiplier became singular"))?,
        );
        let mut acc = DVector::zeros(self.dim);
        for j in 1..rhs.len() {
            acc.copy_from(&rhs[j]);
            for (i, fi) in f.iter().enumerate() {
                let w = if i == 0 { 0.5 } else { 1.0 };
                acc.gemv(-self.h * w, &self.kernel[j - i], fi, 1.0);
            }
            let fj = self
                .step_lu
                .solve(&acc)
                .ok_or_else(|| Error::numeric("volterra", "multiplier became singular"))?;
            f.push(fj);
        }
        Ok(f)
    }
}
