//! Plant description: a 2x2 heterodirectional transport system on `z ∈ [0,1]`
//! coupled to an ODE at the unactuated boundary `z = 0`.
//!
//! ```text
//! ξ̇(t)      = F ξ(t) + b x₁(0, t)
//! x₂(0, t)  = q₀ x₁(0, t) + cᵀ ξ(t)
//! ∂ₜx(z, t) = Λ(z) ∂_z x(z, t) + A(z) x(z, t),   Λ(z) = diag(λ₁(z), −λ₂(z))
//! x₁(1, t)  = q₁ x₂(1, t) + u(t)
//! ```
//!
//! with `λ₁, λ₂ > 0`, so `x₁` propagates toward `z = 0` (carrying the input
//! to the ODE) and `x₂` toward `z = 1` (carrying the reflection back to the
//! actuator). Coefficient functions are stored as tables on a uniform
//! z-grid; [`CharacteristicMap`] provides the travel-time coordinates
//! `φᵢ(z) = ∫₀^z dζ/λᵢ(ζ)` and their inverses, which every downstream module
//! (kernel solver, predictors, simulator) uses to trace characteristics.

use nalgebra::{DMatrix, DVector};

use crate::numerics::{cumulative_trapezoid, interp_uniform, MonotoneInverse};
use crate::{Error, Result};

/// Uniform spatial grid `z_k = k / m`, `k = 0..=m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    m: usize,
}

impl Grid {
    /// A grid with `m` intervals (`m + 1` nodes).
    pub fn new(m: usize) -> Result<Self> {
        if m < 8 {
            return Err(Error::invalid_input("grid needs at least 8 intervals"));
        }
        Ok(Self { m })
    }

    /// Number of intervals.
    #[inline]
    pub fn intervals(&self) -> usize {
        self.m
    }

    /// Number of nodes (`intervals + 1`).
    #[inline]
    pub fn len(&self) -> usize {
        self.m + 1
    }

    /// Grids are never empty; this mirrors `len` for clippy's sake.
    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Grid spacing `1 / m`.
    #[inline]
    pub fn step(&self) -> f64 {
        1.0 / self.m as f64
    }

    /// Node coordinate `z_k`.
    #[inline]
    pub fn node(&self, k: usize) -> f64 {
        k as f64 * self.step()
    }

    /// Iterator over the node coordinates.
    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|k| self.node(k))
    }
}

/// Parameters of the heavy-rope benchmark: a rope of length `ell` and line
/// density `rho` hanging from a moving suspension, with a payload of mass
/// `payload` at the free end, under gravity `g`.
///
/// In the normalized plant the two transport speeds coincide,
/// `λ₁(z) = λ₂(z) = λ(z)/ell` with `λ(z) = √((g/rho)(rho·ell·z + payload))`,
/// the ODE is the payload dynamics (`n = 2`), and both reflections are `−1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeavyRopeParams {
    /// Line density of the rope (kg/m).
    pub rho: f64,
    /// Rope length (m).
    pub ell: f64,
    /// Gravitational acceleration (m/s²).
    pub g: f64,
    /// Payload mass at the free end (kg).
    pub payload: f64,
}

impl Default for HeavyRopeParams {
    /// The benchmark values: `rho = 0.3`, `ell = 3`, `g = 9.81`,
    /// `payload = 0.25`.
    fn default() -> Self {
        Self {
            rho: 0.3,
            ell: 3.0,
            g: 9.81,
            payload: 0.25,
        }
    }
}

impl HeavyRopeParams {
    /// Wave speed `λ(z) = √((g/rho)(rho·ell·z + payload))` before length
    /// normalization.
    pub fn wave_speed(&self, z: f64) -> f64 {
        ((self.g / self.rho) * (self.rho * self.ell * z + self.payload)).sqrt()
    }

    /// Analytic travel time of the normalized transport,
    /// `∫₀¹ ell/λ(z) dz`.
    pub fn travel_time(&self) -> f64 {
        let s0 = self.payload.sqrt();
        let s1 = (self.rho * self.ell + self.payload).sqrt();
        2.0 / self.rho * (self.rho / self.g).sqrt() * (s1 - s0)
    }
}

/// The plant: ODE data `(F, b, c)`, boundary reflections `(q₀, q₁)`, and the
/// transport coefficients `λᵢ`, `A` tabulated on a uniform grid.
#[derive(Debug, Clone)]
pub struct System {
    grid: Grid,
    /// ODE dimension `n ≥ 0`.
    pub ode_dim: usize,
    /// ODE system matrix `F` (`n × n`).
    pub f: DMatrix<f64>,
    /// ODE input vector `b` (`n`), driven by `x₁(0, t)`.
    pub b: DVector<f64>,
    /// ODE output vector `c` (`n`), feeding the reflection at `z = 0`.
    pub c: DVector<f64>,
    /// Reflection coefficient at `z = 0` (must be nonzero).
    pub q0: f64,
    /// Reflection coefficient at the actuated end `z = 1`.
    pub q1: f64,
    /// Speed `λ₁(z_k) > 0` of the component travelling toward `z = 0`.
    pub lambda1: Vec<f64>,
    /// Speed `λ₂(z_k) > 0` of the component travelling toward `z = 1`.
    pub lambda2: Vec<f64>,
    /// In-domain coupling `A(z_k)`, row-major `[A₁₁, A₁₂, A₂₁, A₂₂]`.
    pub a: [Vec<f64>; 4],
}

impl System {
    /// Builds a system by sampling coefficient functions on `grid`.
    ///
    /// `a(z)` returns the 2x2 coupling matrix rows `[[A₁₁, A₁₂], [A₂₁, A₂₂]]`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_fns(
        grid: Grid,
        f: DMatrix<f64>,
        b: DVector<f64>,
        c: DVector<f64>,
        q0: f64,
        q1: f64,
        mut lambda1: impl FnMut(f64) -> f64,
        mut lambda2: impl FnMut(f64) -> f64,
        mut a: impl FnMut(f64) -> [[f64; 2]; 2],
    ) -> Result<Self> {
        let nodes: Vec<f64> = grid.nodes().collect();
        let l1 = nodes.iter().map(|&z| lambda1(z)).collect();
        let l2 = nodes.iter().map(|&z| lambda2(z)).collect();
        let mut coeffs = [
            Vec::with_capacity(grid.len()),
            Vec::with_capacity(grid.len()),
            Vec::with_capacity(grid.len()),
            Vec::with_capacity(grid.len()),
        ];
        for &z in &nodes {
            let m = a(z);
            coeffs[0].push(m[0][0]);
            coeffs[1].push(m[0][1]);
            coeffs[2].push(m[1][0]);
            coeffs[3].push(m[1][1]);
        }
        Self::from_tables(grid, f, b, c, q0, q1, l1, l2, coeffs)
    }

    /// Builds a system from coefficient tables already sampled on `grid`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_tables(
        grid: Grid,
        f: DMatrix<f64>,
        b: DVector<f64>,
        c: DVector<f64>,
        q0: f64,
        q1: f64,
        lambda1: Vec<f64>,
        lambda2: Vec<f64>,
        a: [Vec<f64>; 4],
    ) -> Result<Self> {
        let sys = Self {
            grid,
            ode_dim: f.nrows(),
            f,
            b,
            c,
            q0,
            q1,
            lambda1,
            lambda2,
            a,
        };
        sys.validate()?;
        Ok(sys)
    }

    /// The heavy-rope benchmark plant on `grid`.
    ///
    /// Uses the analytic speed derivative `λ'(z) = g·ell / (2 λ(z))` for the
    /// coupling terms `A_{i1} = −A_{i2} = λ'(z)/(2 ell)` instead of
    /// differencing the table.
    ///
    /// # Example
    ///
    /// ```
    /// use hypctrl::model::{Grid, HeavyRopeParams, System};
    ///
    /// let sys = System::heavy_rope(HeavyRopeParams::default(), Grid::new(100).unwrap()).unwrap();
    /// let ch = sys.characteristics().unwrap();
    /// assert!((ch.tau1 - 0.667).abs() < 5e-3);
    /// assert!((ch.tau1 - ch.tau2).abs() < 1e-12);
    /// ```
    pub fn heavy_rope(params: HeavyRopeParams, grid: Grid) -> Result<Self> {
        if params.rho <= 0.0 || params.ell <= 0.0 || params.g <= 0.0 || params.payload <= 0.0 {
            return Err(Error::invalid_input(
                "heavy rope parameters must be positive",
            ));
        }
        let HeavyRopeParams { ell, g, .. } = params;
        let lambda0 = params.wave_speed(0.0);
        let f = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -g / lambda0]);
        let b = DVector::from_column_slice(&[0.0, 2.0 * g / lambda0]);
        let c = DVector::from_column_slice(&[0.0, 1.0]);
        let lam = |z: f64| params.wave_speed(z) / ell;
        // λ'(z) = g·ell/(2λ(z)); coupling rows A_{i1} = −A_{i2} = λ'/(2 ell).
        let coupling = move |z: f64| {
            let d = g * ell / (2.0 * params.wave_speed(z)) / (2.0 * ell);
            [[d, -d], [d, -d]]
        };
        Self::from_fns(grid, f, b, c, -1.0, -1.0, lam, lam, coupling)
    }

    /// The spatial grid the coefficient tables live on.
    #[inline]
    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Linear interpolation of `λ₁` at `z`.
    #[inline]
    pub fn lambda1_at(&self, z: f64) -> f64 {
        interp_uniform(0.0, self.grid.step(), &self.lambda1, z)
    }

    /// Linear interpolation of `λ₂` at `z`.
    #[inline]
    pub fn lambda2_at(&self, z: f64) -> f64 {
        interp_uniform(0.0, self.grid.step(), &self.lambda2, z)
    }

    /// Linear interpolation of a coupling entry (`idx` row-major in
    /// `[A₁₁, A₁₂, A₂₁, A₂₂]`) at `z`.
    #[inline]
    pub fn coupling_at(&self, idx: usize, z: f64) -> f64 {
        interp_uniform(0.0, self.grid.step(), &self.a[idx], z)
    }

    /// Controllability matrix `[b, Fb, …, F^{n−1}b]` of the ODE pair.
    pub fn controllability_matrix(&self) -> DMatrix<f64> {
        let n = self.ode_dim;
        let mut mc = DMatrix::zeros(n, n);
        let mut col = self.b.clone();
        for j in 0..n {
            mc.set_column(j, &col);
            if j + 1 < n {
                col = &self.f * col;
            }
        }
        mc
    }

    /// Checks the standing assumptions: all tables finite and sized to the
    /// grid, `λᵢ > 0` everywhere, `q₀ ≠ 0`, and `(F, b)` controllable.
    pub fn validate(&self) -> Result<()> {
        let n = self.ode_dim;
        if self.f.nrows() != n || self.f.ncols() != n || self.b.len() != n || self.c.len() != n {
            return Err(Error::invalid_input("ODE data dimensions disagree"));
        }
        let len = self.grid.len();
        if self.lambda1.len() != len
            || self.lambda2.len() != len
            || self.a.iter().any(|t| t.len() != len)
        {
            return Err(Error::invalid_input(
                "coefficient tables must match the grid",
            ));
        }
        let finite = |t: &[f64]| t.iter().all(|v| v.is_finite());
        if !finite(&self.lambda1)
            || !finite(&self.lambda2)
            || !self.a.iter().all(|t| finite(t))
            || !self.f.iter().all(|v| v.is_finite())
            || !self.b.iter().all(|v| v.is_finite())
            || !self.c.iter().all(|v| v.is_finite())
        {
            return Err(Error::invalid_input("coefficient tables must be finite"));
        }
        if self.lambda1.iter().chain(&self.lambda2).any(|&l| l <= 0.0) {
            return Err(Error::invalid_input("transport speeds must be positive"));
        }
        if self.q0 == 0.0 || !self.q0.is_finite() || !self.q1.is_finite() {
            return Err(Error::invalid_input(
                "reflection q0 must be nonzero (and q1 finite)",
            ));
        }
        if n > 0 {
            let mc = self.controllability_matrix();
            let svd = mc.svd(false, false);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.min();
            if !(smax > 0.0) || smin <= 1e-10 * smax {
                return Err(Error::invalid_input(
                    "(F, b) must be controllable (controllability matrix is rank deficient)",
                ));
            }
        }
        Ok(())
    }

    /// Travel-time coordinates of both transport components.
    pub fn characteristics(&self) -> Result<CharacteristicMap> {
        CharacteristicMap::new(self)
    }
}

/// Travel-time (characteristic) coordinates `φᵢ(z) = ∫₀^z dζ / λᵢ(ζ)` with
/// their inverses `ψᵢ` (`ψᵢ(φᵢ(z)) = z`) and the end-to-end travel times
/// `τᵢ = φᵢ(1)`.
#[derive(Debug, Clone)]
pub struct CharacteristicMap {
    grid: Grid,
    /// Travel time from `0` to `z` for the component moving toward `z = 0`.
    pub phi1: Vec<f64>,
    /// Travel time from `0` to `z` for the component moving toward `z = 1`.
    pub phi2: Vec<f64>,
    /// `τ₁ = φ₁(1)`: input-to-ODE transport delay.
    pub tau1: f64,
    /// `τ₂ = φ₂(1)`: ODE-to-actuator transport delay.
    pub tau2: f64,
    psi1: MonotoneInverse,
    psi2: MonotoneInverse,
}

impl CharacteristicMap {
    fn new(sys: &System) -> Result<Self> {
        let grid = sys.grid();
        let h = grid.step();
        let inv1: Vec<f64> = sys.lambda1.iter().map(|&l| 1.0 / l).collect();
        let inv2: Vec<f64> = sys.lambda2.iter().map(|&l| 1.0 / l).collect();
        let phi1 = cumulative_trapezoid(&inv1, h);
        let phi2 = cumulative_trapezoid(&inv2, h);
        let tau1 = *phi1.last().expect("grid is non-empty");
        let tau2 = *phi2.last().expect("grid is non-empty");
        let psi1 = MonotoneInverse::new(0.0, h, &phi1, 8)?;
        let psi2 = MonotoneInverse::new(0.0, h, &phi2, 8)?;
        Ok(Self {
            grid,
            phi1,
            phi2,
            tau1,
            tau2,
            psi1,
            psi2,
        })
    }

    /// The grid the tables live on.
    #[inline]
    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// `φ₁(z)` by linear interpolation.
    #[inline]
    pub fn phi1_at(&self, z: f64) -> f64 {
        interp_uniform(0.0, self.grid.step(), &self.phi1, z)
    }

    /// `φ₂(z)` by linear interpolation.
    #[inline]
    pub fn phi2_at(&self, z: f64) -> f64 {
        interp_uniform(0.0, self.grid.step(), &self.phi2, z)
    }

    /// `ψ₁(τ)`: the position reached after travel time `τ` from `z = 0`
    /// (clamped to `[0, 1]`).
    #[inline]
    pub fn psi1_at(&self, tau: f64) -> f64 {
        self.psi1.eval(tau)
    }

    /// `ψ₂(τ)` (clamped to `[0, 1]`).
    #[inline]
    pub fn psi2_at(&self, tau: f64) -> f64 {
        self.psi2.eval(tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn benchmark(m: usize) -> System {
        System::heavy_rope(HeavyRopeParams::default(), Grid::new(m).unwrap()).unwrap()
    }

    #[test]
    fn travel_times_match_analytic_value() {
        let sys = benchmark(400);
        let ch = sys.characteristics().unwrap();
        let exact = HeavyRopeParams::default().travel_time();
        // Closed-form antiderivative: τ = (2/ρ)√(ρ/g)(√(ρℓ+m) − √m).
        assert_relative_eq!(exact, 0.667, epsilon = 5e-4);
        assert_relative_eq!(ch.tau1, exact, epsilon = 1e-5);
        assert_relative_eq!(ch.tau2, exact, epsilon = 1e-5);
    }

    #[test]
    fn ode_spectrum_of_benchmark() {
        let sys = benchmark(64);
        let eigs = sys.f.complex_eigenvalues();
        let mut re: Vec<f64> = eigs.iter().map(|e| e.re).collect();
        re.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(eigs.iter().all(|e| e.im.abs() < 1e-12));
        assert_relative_eq!(re[0], -3.431, epsilon = 1e-3);
        assert_relative_eq!(re[1], 0.0, epsilon = 1e-12);
        // λ(0) = √(g·payload/ρ)
        assert_relative_eq!(
            HeavyRopeParams::default().wave_speed(0.0),
            (9.81 * 0.25 / 0.3f64).sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn characteristic_maps_invert_each_other() {
        let sys = benchmark(200);
        let ch = sys.characteristics().unwrap();
        for &z in &[0.0, 0.1, 0.37, 0.5, 0.82, 1.0] {
            assert_relative_eq!(ch.psi1_at(ch.phi1_at(z)), z, epsilon = 5e-6);
            assert_relative_eq!(ch.psi2_at(ch.phi2_at(z)), z, epsilon = 5e-6);
        }
        assert_eq!(ch.phi1[0], 0.0);
        assert_relative_eq!(ch.phi1_at(1.0), ch.tau1, epsilon = 1e-14);
    }

    #[test]
    fn validation_rejects_broken_assumptions() {
        let grid = Grid::new(32).unwrap();
        let ok = |q0: f64, b: DVector<f64>| {
            System::from_fns(
                grid,
                dmatrix![0.0, 1.0; 0.0, -1.0],
                b,
                dvector![0.0, 1.0],
                q0,
                0.5,
                |_| 1.0,
                |_| 2.0,
                |_| [[0.0, 0.1], [0.2, 0.0]],
            )
        };
        assert!(ok(-1.0, dvector![0.0, 1.0]).is_ok());
        // q0 = 0 breaks the reflection assumption.
        assert!(ok(0.0, dvector![0.0, 1.0]).is_err());
        // b = 0 breaks controllability.
        assert!(ok(-1.0, dvector![0.0, 0.0]).is_err());
        // negative speed
        let bad_speed = System::from_fns(
            grid,
            dmatrix![0.0, 1.0; 0.0, -1.0],
            dvector![0.0, 1.0],
            dvector![0.0, 1.0],
            -1.0,
            0.5,
            |z| 1.0 - 2.0 * z,
            |_| 2.0,
            |_| [[0.0; 2]; 2],
        );
        assert!(bad_speed.is_err());
    }

    #[test]
    fn zero_dimensional_ode_is_allowed() {
        let grid = Grid::new(32).unwrap();
        let sys = System::from_fns(
            grid,
            DMatrix::zeros(0, 0),
            DVector::zeros(0),
            DVector::zeros(0),
            2.0,
            0.5,
            |_| 1.0,
            |_| 1.0,
            |_| [[0.0, 0.3], [0.3, 0.0]],
        );
        assert!(sys.is_ok());
    }
}
