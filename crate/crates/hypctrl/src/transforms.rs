//! Coordinate changes that bring the plant into a cascade form.
//!
//! Two invertible transformations are composed:
//!
//! 1. A diagonal **scaling** `x̃ = E(z) x`, `E = diag(e^{α₁}, e^{−α₂})` with
//!    `αᵢ(z) = ∫₀^z Aᵢᵢ/λᵢ dζ`, which removes the diagonal of the coupling
//!    matrix while keeping the boundary data at `z = 0` unchanged
//!    (`E(0) = I`). The actuated reflection becomes
//!    `q̄₁ = q₁ e^{α₁(1)+α₂(1)}` and the input enters as `e^{α₁(1)} u`.
//!
//! 2. A triangular Volterra transform `x̄(z) = x̃(z) − ∫₀^z K(z,ζ) x̃(ζ) dζ`
//!    whose 2x2 kernel `K` removes the remaining off-diagonal coupling, so
//!    the image satisfies pure transport driven only by the ODE state,
//!
//!    ```text
//!    ∂ₜx̄ = Λ(z) ∂_z x̄ + C(z) ξ,        C(z) = K(z,0) Λ(0) e₂ cᵀ.
//!    ```
//!
//! The kernel solves first-order transport equations on the triangle
//! `0 ≤ ζ ≤ z ≤ 1` with data on the diagonal (for the cross components) and
//! on the edge `ζ = 0` (tying the components together through the
//! reflection `q₀`). Integrating along the characteristic curves of each
//! component turns the problem into coupled integral equations that are
//! solved by successive approximation; the iteration converges for bounded
//! coefficients. The inverse kernel follows from the reciprocity relation
//! `K_I(z,ζ) = K(z,ζ) + ∫_ζ^z K(z,s) K_I(s,ζ) ds`, a family of Volterra
//! equations of the second kind.

use crate::model::{CharacteristicMap, Grid, System};
use crate::numerics::{cumulative_trapezoid, interp_uniform, trapezoid_weight, MonotoneInverse};
use crate::{Error, Result};

/// Sup-norm stopping tolerance for the kernel iteration.
pub const KERNEL_TOL: f64 = 1e-10;
/// Iteration cap for the kernel solve.
pub const KERNEL_MAX_SWEEPS: usize = 200;

/// Diagonal scaling `x̃ = E(z) x` and the data of the scaled system.
#[derive(Debug, Clone)]
pub struct Scaling {
    grid: Grid,
    /// `e^{α₁(z_k)}`: multiplies `x₁`.
    pub scale1: Vec<f64>,
    /// `e^{−α₂(z_k)}`: multiplies `x₂`.
    pub scale2: Vec<f64>,
    /// Scaled actuated-end reflection `q̄₁ = q₁ e^{α₁(1)+α₂(1)}`.
    pub q1_bar: f64,
    /// Input gain `e^{α₁(1)}`: the scaled system sees `e^{α₁(1)} u`.
    pub input_gain: f64,
    /// Scaled coupling `Ã₁₂(z_k) = A₁₂ e^{α₁+α₂}` (the diagonal is zero).
    pub a12: Vec<f64>,
    /// Scaled coupling `Ã₂₁(z_k) = A₂₁ e^{−α₁−α₂}`.
    pub a21: Vec<f64>,
}

impl Scaling {
    /// Computes the scaling gains for `sys`.
    pub fn new(sys: &System) -> Self {
        let grid = sys.grid();
        let h = grid.step();
        let len = grid.len();
        let d1: Vec<f64> = (0..len).map(|k| sys.a[0][k] / sys.lambda1[k]).collect();
        let d2: Vec<f64> = (0..len).map(|k| sys.a[3][k] / sys.lambda2[k]).collect();
        let alpha1 = cumulative_trapezoid(&d1, h);
        let alpha2 = cumulative_trapezoid(&d2, h);
        let scale1: Vec<f64> = alpha1.iter().map(|a| a.exp()).collect();
        let scale2: Vec<f64> = alpha2.iter().map(|a| (-a).exp()).collect();
        let sum_end = alpha1[len - 1] + alpha2[len - 1];
        let a12: Vec<f64> = (0..len)
            .map(|k| sys.a[1][k] * (alpha1[k] + alpha2[k]).exp())
            .collect();
        let a21: Vec<f64> = (0..len)
            .map(|k| sys.a[2][k] * (-(alpha1[k] + alpha2[k])).exp())
            .collect();
        Self {
            grid,
            scale1,
            scale2,
            q1_bar: sys.q1 * sum_end.exp(),
            input_gain: alpha1[len - 1].exp(),
            a12,
            a21,
        }
    }

    /// The grid the gain tables live on.
    #[inline]
    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Applies `x̃ = E x` to nodal profiles.
    pub fn scale(&self, x1: &[f64], x2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(x1.len(), self.scale1.len());
        assert_eq!(x2.len(), self.scale2.len());
        let t1 = x1.iter().zip(&self.scale1).map(|(x, s)| x * s).collect();
        let t2 = x2.iter().zip(&self.scale2).map(|(x, s)| x * s).collect();
        (t1, t2)
    }

    /// Applies `x = E⁻¹ x̃` to nodal profiles.
    pub fn unscale(&self, t1: &[f64], t2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(t1.len(), self.scale1.len());
        assert_eq!(t2.len(), self.scale2.len());
        let x1 = t1.iter().zip(&self.scale1).map(|(x, s)| x / s).collect();
        let x2 = t2.iter().zip(&self.scale2).map(|(x, s)| x / s).collect();
        (x1, x2)
    }
}

/// One of the four kernel components, indexed as `K_{rc}` where `r` is the
/// output component and `c` the integrated component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelComponent {
    /// `K₁₁`
    K11,
    /// `K₁₂`
    K12,
    /// `K₂₁`
    K21,
    /// `K₂₂`
    K22,
}

impl KernelComponent {
    /// All components in row-major order.
    pub const ALL: [Self; 4] = [Self::K11, Self::K12, Self::K21, Self::K22];
}

/// A 2x2 matrix kernel tabulated on the triangle `ζ ≤ z` of a uniform grid.
///
/// Entries with `ζ > z` are stored as zero and never read.
#[derive(Debug, Clone)]
pub struct KernelTables {
    grid: Grid,
    len: usize,
    k11: Vec<f64>,
    k12: Vec<f64>,
    k21: Vec<f64>,
    k22: Vec<f64>,
    /// Number of successive-approximation sweeps the solve needed
    /// (zero for kernels obtained by other means).
    pub sweeps: usize,
}

#[inline]
fn idx(len: usize, j: usize, i: usize) -> usize {
    j * len + i
}

/// Interpolates a kernel table along `z` at a fixed `ζ` column, clamping to
/// the triangle.
#[inline]
fn column_lerp(table: &[f64], len: usize, col: usize, z: f64, h: f64) -> f64 {
    let top = len - 1;
    if col >= top {
        return table[idx(len, top, col)];
    }
    let pos = (z / h).clamp(col as f64, top as f64);
    let j0 = (pos.floor() as usize).clamp(col, top - 1);
    let frac = pos - j0 as f64;
    let a = table[idx(len, j0, col)];
    let b = table[idx(len, j0 + 1, col)];
    a + frac * (b - a)
}

/// Interpolates the diagonal `t ↦ K(t, t)` of a kernel table.
#[inline]
fn diagonal_lerp(table: &[f64], len: usize, z: f64, h: f64) -> f64 {
    let top = len - 1;
    let pos = (z / h).clamp(0.0, top as f64);
    let t0 = (pos.floor() as usize).min(top - 1);
    let frac = pos - t0 as f64;
    let a = table[idx(len, t0, t0)];
    let b = table[idx(len, t0 + 1, t0 + 1)];
    a + frac * (b - a)
}

/// Trapezoid integral of a node-indexed integrand from node `i` up to the
/// off-grid point `z0 ∈ [z_i, 1]`, whose integrand value `f_end` is known.
#[inline]
fn integrate_to_point(
    i: usize,
    z0: f64,
    h: f64,
    mut f: impl FnMut(usize) -> f64,
    f_end: f64,
) -> f64 {
    let t_last = ((z0 / h) + 1e-12).floor() as usize;
    let mut acc = 0.0;
    let mut prev = f(i);
    let mut t_prev = i;
    for t in (i + 1)..=t_last.max(i) {
        let cur = f(t);
        acc += 0.5 * h * (prev + cur);
        prev = cur;
        t_prev = t;
    }
    let delta = z0 - t_prev as f64 * h;
    if delta > 1e-14 {
        acc += 0.5 * delta * (prev + f_end);
    }
    acc
}

impl KernelTables {
    fn zeros(grid: Grid) -> Self {
        let len = grid.len();
        Self {
            grid,
            len,
            k11: vec![0.0; len * len],
            k12: vec![0.0; len * len],
            k21: vec![0.0; len * len],
            k22: vec![0.0; len * len],
            sweeps: 0,
        }
    }

    /// The grid the tables live on.
    #[inline]
    pub fn grid(&self) -> Grid {
        self.grid
    }

    fn table(&self, c: KernelComponent) -> &[f64] {
        match c {
            KernelComponent::K11 => &self.k11,
            KernelComponent::K12 => &self.k12,
            KernelComponent::K21 => &self.k21,
            KernelComponent::K22 => &self.k22,
        }
    }

    /// Nodal value `K_c(z_j, ζ_i)`; zero above the diagonal.
    #[inline]
    pub fn entry(&self, c: KernelComponent, j: usize, i: usize) -> f64 {
        self.table(c)[idx(self.len, j, i)]
    }

    #[inline]
    fn block(&self, j: usize, i: usize) -> [f64; 4] {
        let p = idx(self.len, j, i);
        [self.k11[p], self.k12[p], self.k21[p], self.k22[p]]
    }

    /// Applies the Volterra operator: `out(z) = x(z) + sign·∫₀^z K(z,ζ) x(ζ) dζ`
    /// by nodal trapezoid quadrature.
    ///
    /// `sign = -1` maps into the transformed coordinates with the forward
    /// kernel; `sign = +1` maps back with the reciprocal kernel.
    pub fn apply(&self, sign: f64, x1: &[f64], x2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(x1.len(), self.len);
        assert_eq!(x2.len(), self.len);
        let h = self.grid.step();
        let mut y1 = Vec::with_capacity(self.len);
        let mut y2 = Vec::with_capacity(self.len);
        for j in 0..self.len {
            let mut acc1 = 0.0;
            let mut acc2 = 0.0;
            for i in 0..=j {
                let w = trapezoid_weight(i, j + 1);
                let p = idx(self.len, j, i);
                acc1 += w * (self.k11[p] * x1[i] + self.k12[p] * x2[i]);
                acc2 += w * (self.k21[p] * x1[i] + self.k22[p] * x2[i]);
            }
            y1.push(x1[j] + sign * h * acc1);
            y2.push(x2[j] + sign * h * acc2);
        }
        (y1, y2)
    }

    /// Solves the reciprocity relation
    /// `K_I(z,ζ) = K(z,ζ) + ∫_ζ^z K(z,s) K_I(s,ζ) ds`
    /// column by column, yielding the kernel of the inverse transform.
    pub fn reciprocal(&self) -> Result<Self> {
        let len = self.len;
        let h = self.grid.step();
        let mut out = Self::zeros(self.grid);
        let mut col: Vec<[f64; 4]> = Vec::with_capacity(len);
        for i in 0..len {
            col.clear();
            for jj in 0..(len - i) {
                let row = i + jj;
                let mut acc = self.block(row, i);
                for (l, fl) in col.iter().enumerate() {
                    let w = if l == 0 { 0.5 } else { 1.0 };
                    let kb = self.block(row, i + l);
                    let s = h * w;
                    acc[0] += s * (kb[0] * fl[0] + kb[1] * fl[2]);
                    acc[1] += s * (kb[0] * fl[1] + kb[1] * fl[3]);
                    acc[2] += s * (kb[2] * fl[0] + kb[3] * fl[2]);
                    acc[3] += s * (kb[2] * fl[1] + kb[3] * fl[3]);
                }
                let f = if jj == 0 {
                    acc
                } else {
                    let kd = self.block(row, row);
                    let a = [
                        1.0 - 0.5 * h * kd[0],
                        -0.5 * h * kd[1],
                        -0.5 * h * kd[2],
                        1.0 - 0.5 * h * kd[3],
                    ];
                    let det = a[0] * a[3] - a[1] * a[2];
                    if det.abs() < 1e-12 {
                        return Err(Error::numeric(
                            "reciprocal kernel",
                            "singular step multiplier",
                        ));
                    }
                    [
                        (a[3] * acc[0] - a[1] * acc[2]) / det,
                        (a[3] * acc[1] - a[1] * acc[3]) / det,
                        (-a[2] * acc[0] + a[0] * acc[2]) / det,
                        (-a[2] * acc[1] + a[0] * acc[3]) / det,
                    ]
                };
                let p = idx(len, row, i);
                out.k11[p] = f[0];
                out.k12[p] = f[1];
                out.k21[p] = f[2];
                out.k22[p] = f[3];
                col.push(f);
            }
        }
        Ok(out)
    }

    /// Sup-norm of the transport-equation residual of the tables at interior
    /// points, using centered differences. First-order small in the grid
    /// step for a converged kernel.
    pub fn interior_residual(&self, sys: &System, scaling: &Scaling) -> f64 {
        self.interior_residual_by_component(sys, scaling)
            .into_iter()
            .fold(0.0, f64::max)
    }

    /// Like [`interior_residual`](Self::interior_residual) but reported per
    /// kernel component `(K₁₁, K₁₂, K₂₁, K₂₂)`.
    pub fn interior_residual_by_component(&self, sys: &System, scaling: &Scaling) -> [f64; 4] {
        let len = self.len;
        let h = self.grid.step();
        let l1 = &sys.lambda1;
        let l2 = &sys.lambda2;
        let mut worst = [0.0f64; 4];
        for j in 2..len - 1 {
            for i in 1..=j.saturating_sub(2) {
                let dz = |t: &[f64]| (t[idx(len, j + 1, i)] - t[idx(len, j - 1, i)]) / (2.0 * h);
                let dzeta = |t: &[f64], lam: &[f64]| {
                    (lam[i + 1] * t[idx(len, j, i + 1)] - lam[i - 1] * t[idx(len, j, i - 1)])
                        / (2.0 * h)
                };
                let p = idx(len, j, i);
                let r11 =
                    l1[j] * dz(&self.k11) + dzeta(&self.k11, l1) - scaling.a21[i] * self.k12[p];
                let r12 =
                    l1[j] * dz(&self.k12) - dzeta(&self.k12, l2) - scaling.a12[i] * self.k11[p];
                let r21 =
                    -l2[j] * dz(&self.k21) + dzeta(&self.k21, l1) - scaling.a21[i] * self.k22[p];
                let r22 =
                    -l2[j] * dz(&self.k22) - dzeta(&self.k22, l2) - scaling.a12[i] * self.k21[p];
                for (w, r) in worst.iter_mut().zip([r11, r12, r21, r22]) {
                    *w = w.max(r.abs());
                }
            }
        }
        worst
    }

    /// Maximum deviation of the stored tables from their boundary data,
    /// recomputed from the system coefficients: the diagonal values of the
    /// cross components and the reflection tie on the edge `ζ = 0`, reported
    /// as `(diag K₁₂, diag K₂₁, edge K₁₁, edge K₂₂)`.
    pub fn boundary_residual(&self, sys: &System, scaling: &Scaling) -> [f64; 4] {
        let len = self.len;
        let l1 = &sys.lambda1;
        let l2 = &sys.lambda2;
        let mut worst = [0.0f64; 4];
        for j in 0..len {
            let d = idx(len, j, j);
            let e = idx(len, j, 0);
            let r_diag12 = self.k12[d] + scaling.a12[j] / (l1[j] + l2[j]);
            let r_diag21 = self.k21[d] - scaling.a21[j] / (l1[j] + l2[j]);
            let r_edge11 = l1[0] * self.k11[e] - sys.q0 * l2[0] * self.k12[e];
            let r_edge22 = sys.q0 * l2[0] * self.k22[e] - l1[0] * self.k21[e];
            for (w, r) in worst
                .iter_mut()
                .zip([r_diag12, r_diag21, r_edge11, r_edge22])
            {
                *w = w.max(r.abs());
            }
        }
        worst
    }
}

/// Solves the kernel equations of the decoupling transform on the triangle
/// `ζ ≤ z` by successive approximation along characteristic curves.
///
/// The cross components carry their data on the diagonal,
///
/// ```text
/// K₁₂(z,z) = −Ã₁₂(z)/(λ₁(z)+λ₂(z)),    K₂₁(z,z) = Ã₂₁(z)/(λ₁(z)+λ₂(z)),
/// ```
///
/// and the straight components are tied to them on the edge `ζ = 0` through
/// the reflection: `λ₁(0)K₁₁(z,0) = q₀λ₂(0)K₁₂(z,0)` and
/// `q₀λ₂(0)K₂₂(z,0) = λ₁(0)K₂₁(z,0)`.
pub fn solve_kernel(
    sys: &System,
    scaling: &Scaling,
    ch: &CharacteristicMap,
) -> Result<KernelTables> {
    let grid = sys.grid();
    let len = grid.len();
    let h = grid.step();
    let l1 = &sys.lambda1;
    let l2 = &sys.lambda2;
    let a12 = &scaling.a12;
    let a21 = &scaling.a21;
    let phi1 = &ch.phi1;
    let phi2 = &ch.phi2;

    // Inverse of the combined travel time m(z) = φ₁(z) + φ₂(z), used to find
    // where a cross-component characteristic meets the diagonal.
    let msum: Vec<f64> = phi1.iter().zip(phi2).map(|(a, b)| a + b).collect();
    let m_inv = MonotoneInverse::new(0.0, h, &msum, 8)?;

    // Diagonal data in the flux variables G₁₂ = λ₂(ζ)K₁₂, G₂₁ = λ₁(ζ)K₂₁.
    let diag12: Vec<f64> = (0..len)
        .map(|t| -l2[t] * a12[t] / (l1[t] + l2[t]))
        .collect();
    let diag21: Vec<f64> = (0..len).map(|t| l1[t] * a21[t] / (l1[t] + l2[t])).collect();

    let mut k = KernelTables::zeros(grid);
    let q0 = sys.q0;

    for sweep in 1..=KERNEL_MAX_SWEEPS {
        let mut delta = 0.0f64;

        // Pass 1: cross components, integrating down from the diagonal.
        for j in 0..len {
            for i in 0..=j {
                let p = idx(len, j, i);
                let (v12, v21);
                if i == j {
                    v12 = diag12[j] / l2[j];
                    v21 = diag21[j] / l1[j];
                } else {
                    let zi = grid.node(i);
                    let zj = grid.node(j);

                    // K₁₂ rides dz/dζ = −λ₁(z)/λ₂(ζ): φ₁(z) + φ₂(ζ) constant.
                    let m12 = phi1[j] + phi2[i];
                    let z0 = m_inv.eval(m12).clamp(zi, zj);
                    let start = interp_uniform(0.0, h, &diag12, z0);
                    let integral = integrate_to_point(
                        i,
                        z0,
                        h,
                        |t| a12[t] * column_lerp(&k.k11, len, t, ch.psi1_at(m12 - phi2[t]), h),
                        interp_uniform(0.0, h, a12, z0) * diagonal_lerp(&k.k11, len, z0, h),
                    );
                    v12 = (start + integral) / l2[i];

                    // K₂₁ rides dz/dζ = −λ₂(z)/λ₁(ζ): φ₂(z) + φ₁(ζ) constant.
                    let m21 = phi2[j] + phi1[i];
                    let z0b = m_inv.eval(m21).clamp(zi, zj);
                    let startb = interp_uniform(0.0, h, &diag21, z0b);
                    let integralb = integrate_to_point(
                        i,
                        z0b,
                        h,
                        |t| a21[t] * column_lerp(&k.k22, len, t, ch.psi2_at(m21 - phi1[t]), h),
                        interp_uniform(0.0, h, a21, z0b) * diagonal_lerp(&k.k22, len, z0b, h),
                    );
                    v21 = (startb - integralb) / l1[i];
                }
                delta = delta
                    .max((v12 - k.k12[p]).abs())
                    .max((v21 - k.k21[p]).abs());
                k.k12[p] = v12;
                k.k21[p] = v21;
            }
        }

        // Pass 2: straight components, integrating up from the edge ζ = 0.
        for j in 0..len {
            for i in 0..=j {
                let p = idx(len, j, i);
                let (v11, v22);
                if i == 0 {
                    v11 = q0 * l2[0] * k.k12[p] / l1[0];
                    v22 = l1[0] * k.k21[p] / (q0 * l2[0]);
                } else {
                    // K₁₁ rides dz/dζ = λ₁(z)/λ₁(ζ): φ₁(z) − φ₁(ζ) constant.
                    let d1 = phi1[j] - phi1[i];
                    let z0 = ch.psi1_at(d1);
                    let start = q0 * l2[0] * column_lerp(&k.k12, len, 0, z0, h);
                    let mut acc = 0.0;
                    let mut prev = a21[0] * column_lerp(&k.k12, len, 0, ch.psi1_at(d1), h);
                    for t in 1..=i {
                        let cur = a21[t] * column_lerp(&k.k12, len, t, ch.psi1_at(d1 + phi1[t]), h);
                        acc += 0.5 * h * (prev + cur);
                        prev = cur;
                    }
                    v11 = (start + acc) / l1[i];

                    // K₂₂ rides dz/dζ = λ₂(z)/λ₂(ζ): φ₂(z) − φ₂(ζ) constant.
                    let d2 = phi2[j] - phi2[i];
                    let z0b = ch.psi2_at(d2);
                    let startb = l1[0] * column_lerp(&k.k21, len, 0, z0b, h) / q0;
                    let mut accb = 0.0;
                    let mut prevb = a12[0] * column_lerp(&k.k21, len, 0, ch.psi2_at(d2), h);
                    for t in 1..=i {
                        let cur = a12[t] * column_lerp(&k.k21, len, t, ch.psi2_at(d2 + phi2[t]), h);
                        accb += 0.5 * h * (prevb + cur);
                        prevb = cur;
                    }
                    v22 = (startb - accb) / l2[i];
                }
                delta = delta
                    .max((v11 - k.k11[p]).abs())
                    .max((v22 - k.k22[p]).abs());
                k.k11[p] = v11;
                k.k22[p] = v22;
            }
        }

        if !delta.is_finite() {
            return Err(Error::numeric("kernel solve", "iteration diverged"));
        }
        if delta < KERNEL_TOL {
            k.sweeps = sweep;
            return Ok(k);
        }
    }
    Err(Error::numeric(
        "kernel solve",
        format!("no convergence within {KERNEL_MAX_SWEEPS} sweeps"),
    ))
}

/// The full change of coordinates for one plant: scaling, forward and
/// reciprocal kernels, the ODE-to-transport coupling `C(z)` of the image
/// system, and the boundary input map.
#[derive(Debug, Clone)]
pub struct Decoupling {
    grid: Grid,
    /// Diagonal scaling stage.
    pub scaling: Scaling,
    /// Travel-time coordinates of the plant.
    pub chars: CharacteristicMap,
    /// Forward kernel `K`.
    pub kernel: KernelTables,
    /// Reciprocal kernel `K_I` of the inverse transform.
    pub inverse: KernelTables,
    /// First row factor of `C(z)`: `C₁(z) = coupling1(z)·cᵀ` with
    /// `coupling1(z) = −λ₂(0) K₁₂(z, 0)`.
    pub coupling1: Vec<f64>,
    /// Second row factor: `coupling2(z) = −λ₂(0) K₂₂(z, 0)`.
    pub coupling2: Vec<f64>,
    input_w1: Vec<f64>,
    input_w2: Vec<f64>,
}

impl Decoupling {
    /// Builds the complete transform bundle for `sys`.
    ///
    /// # Example
    ///
    /// ```
    /// use hypctrl::model::{Grid, HeavyRopeParams, System};
    /// use hypctrl::transforms::Decoupling;
    ///
    /// let sys = System::heavy_rope(HeavyRopeParams::default(), Grid::new(32).unwrap()).unwrap();
    /// let dec = Decoupling::new(&sys).unwrap();
    /// // Transforming and inverting a profile returns (close to) the input.
    /// let x1: Vec<f64> = sys.grid().nodes().map(|z| (2.0 * z).sin()).collect();
    /// let x2: Vec<f64> = sys.grid().nodes().map(|z| 1.0 - z * z).collect();
    /// let (b1, b2) = dec.to_target(&x1, &x2);
    /// let (r1, r2) = dec.from_target(&b1, &b2);
    /// for (a, b) in x1.iter().zip(&r1).chain(x2.iter().zip(&r2)) {
    ///     assert!((a - b).abs() < 1e-2);
    /// }
    /// ```
    pub fn new(sys: &System) -> Result<Self> {
        let scaling = Scaling::new(sys);
        let chars = sys.characteristics()?;
        let kernel = solve_kernel(sys, &scaling, &chars)?;
        let inverse = kernel.reciprocal()?;
        let grid = sys.grid();
        let len = grid.len();
        let top = len - 1;
        let lam20 = sys.lambda2[0];
        let coupling1: Vec<f64> = (0..len)
            .map(|j| -lam20 * kernel.k12[idx(len, j, 0)])
            .collect();
        let coupling2: Vec<f64> = (0..len)
            .map(|j| -lam20 * kernel.k22[idx(len, j, 0)])
            .collect();
        let q1b = scaling.q1_bar;
        let input_w1: Vec<f64> = (0..len)
            .map(|i| q1b * kernel.k21[idx(len, top, i)] - kernel.k11[idx(len, top, i)])
            .collect();
        let input_w2: Vec<f64> = (0..len)
            .map(|i| q1b * kernel.k22[idx(len, top, i)] - kernel.k12[idx(len, top, i)])
            .collect();
        Ok(Self {
            grid,
            scaling,
            chars,
            kernel,
            inverse,
            coupling1,
            coupling2,
            input_w1,
            input_w2,
        })
    }

    /// The common grid.
    #[inline]
    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// `coupling1(z)` by interpolation.
    #[inline]
    pub fn coupling1_at(&self, z: f64) -> f64 {
        interp_uniform(0.0, self.grid.step(), &self.coupling1, z)
    }

    /// `coupling2(z)` by interpolation.
    #[inline]
    pub fn coupling2_at(&self, z: f64) -> f64 {
        interp_uniform(0.0, self.grid.step(), &self.coupling2, z)
    }

    /// Physical profiles → transformed profiles (`x ↦ x̄`).
    pub fn to_target(&self, x1: &[f64], x2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (t1, t2) = self.scaling.scale(x1, x2);
        self.kernel.apply(-1.0, &t1, &t2)
    }

    /// Transformed profiles → physical profiles (`x̄ ↦ x`).
    pub fn from_target(&self, b1: &[f64], b2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (t1, t2) = self.inverse.apply(1.0, b1, b2);
        self.scaling.unscale(&t1, &t2)
    }

    /// Scaled profiles → transformed profiles (`x̃ ↦ x̄`), when the scaling
    /// has already been applied.
    pub fn scaled_to_target(&self, t1: &[f64], t2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.kernel.apply(-1.0, t1, t2)
    }

    /// Transformed input from the physical one:
    /// `ū = e^{α₁(1)} u + ∫₀¹ (q̄₁e₂ᵀ − e₁ᵀ) K(1,ζ) x̃(ζ) dζ`,
    /// where `x̃` is the scaled profile pair.
    pub fn target_input(&self, u: f64, t1: &[f64], t2: &[f64]) -> f64 {
        self.scaling.input_gain * u + self.boundary_integral(t1, t2)
    }

    /// Physical input that realizes a requested transformed input `u_bar`
    /// given the current scaled profiles.
    pub fn physical_input(&self, u_bar: f64, t1: &[f64], t2: &[f64]) -> f64 {
        (u_bar - self.boundary_integral(t1, t2)) / self.scaling.input_gain
    }

    fn boundary_integral(&self, t1: &[f64], t2: &[f64]) -> f64 {
        assert_eq!(t1.len(), self.input_w1.len());
        assert_eq!(t2.len(), self.input_w2.len());
        let h = self.grid.step();
        let len = self.grid.len();
        let mut acc = 0.0;
        for i in 0..len {
            let w = trapezoid_weight(i, len);
            acc += w * (self.input_w1[i] * t1[i] + self.input_w2[i] * t2[i]);
        }
        h * acc
    }
}
