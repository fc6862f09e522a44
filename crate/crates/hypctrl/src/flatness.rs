//! Trajectory planning and tracking control through a flat output.
//!
//! In the transformed coordinates of [`crate::transforms`], the boundary
//! values at the unactuated end are finite linear combinations of one scalar
//! signal `y` and its derivatives: with `η = T_c ξ` the ODE in regulator
//! form, `y = hᵀξ` satisfies
//!
//! ```text
//! x̄₁(0,t) = p₁ᵀ y^{[n]}(t),      x̄₂(0,t) = p₂ᵀ y^{[n]}(t),
//! ```
//!
//! where `y^{[n]} = (y, ẏ, …, y^{(n)})`. Propagating these boundary values
//! along the transport characteristics parametrizes the entire state by `y`,
//! and evaluating the actuated-end condition turns the input into a linear
//! functional of `y` — point evaluations ("atoms") at the advanced time
//! `t+τ₁` and the delayed time `t−τ₂`, plus distributed terms over
//! `[t−τ₂, t+τ₁]`. Two integration-by-parts rules reduce that functional to
//! a canonical form
//!
//! ```text
//! ū(t) = y^{(n)}(t+τ₁) + Σᵢ aᵢ y^{(i)}(t−τ₂) + ∫_{−τ₂}^{τ₁} a(τ) y^{(n)}(t+τ) dτ,
//! ```
//!
//! in which only the highest derivative appears under the integral and at
//! the advanced time. Matching this against a target error equation
//! `ε^{(n)} + Σ κᵢ ε^{(i)} = 0`, `ε(t) = e_y(t+τ₁) + γ e_y(t−τ₂)`, yields a
//! predictive tracking controller: the advanced values cancel, and
//! everything the feedback needs — delayed derivatives and the window of
//! `y^{(n)}` over `[t−τ₂, t+τ₁]` — is reconstructed from the current state
//! by integrating along characteristics (Volterra equations of the second
//! kind).

use nalgebra::{DMatrix, DVector};

use crate::model::{CharacteristicMap, System};
use crate::numerics::{expm, factorial, interp_uniform, trapezoid_weight};
use crate::transforms::Decoupling;
use crate::volterra::ConvolutionSolver;
use crate::{Error, Result};

/// Access to a scalar signal and its derivatives in a neighborhood of the
/// current time: `derivative(order, offset)` is `y^{(order)}(t + offset)`.
pub trait Signal {
    /// Evaluates `y^{(order)}` at the given offset from the current time.
    fn derivative(&self, order: usize, offset: f64) -> f64;
}

/// Regulator-form data of the ODE and the boundary-trace coefficients.
#[derive(Debug, Clone)]
pub struct FlatStructure {
    /// ODE dimension.
    pub n: usize,
    /// Transformation `η = T_c ξ` to regulator form (`n × n`).
    pub tc: DMatrix<f64>,
    /// Inverse transformation.
    pub tc_inv: DMatrix<f64>,
    /// Flat-output row `h` (`y = hᵀξ`).
    pub h: DVector<f64>,
    /// Coefficients of `x̄₁(0,t) = p₁ᵀ y^{[n]}(t)`; `p1[n] = 1`.
    pub p1: Vec<f64>,
    /// Coefficients of `x̄₂(0,t) = p₂ᵀ y^{[n]}(t)`.
    pub p2: Vec<f64>,
    /// Row `e_nᵀ T_c F` as a vector: `y^{(n)} = x̄₁(0,t) + e_tcf·ξ`.
    pub e_tcf: DVector<f64>,
    /// Row `cᵀ T_c⁻¹` as a vector: maps `y^{[n−1]}` to `cᵀξ`.
    pub c_row: DVector<f64>,
}

impl FlatStructure {
    /// Derives the flat structure of the ODE part of `sys`.
    pub fn new(sys: &System) -> Result<Self> {
        let n = sys.ode_dim;
        if n == 0 {
            return Ok(Self {
                n,
                tc: DMatrix::zeros(0, 0),
                tc_inv: DMatrix::zeros(0, 0),
                h: DVector::zeros(0),
                p1: vec![1.0],
                p2: vec![sys.q0],
                e_tcf: DVector::zeros(0),
                c_row: DVector::zeros(0),
            });
        }
        let mc = sys.controllability_matrix();
        let h = mc
            .transpose()
            .lu()
            .solve(&DVector::from_fn(
                n,
                |i, _| if i + 1 == n { 1.0 } else { 0.0 },
            ))
            .ok_or_else(|| Error::numeric("flat structure", "controllability matrix singular"))?;
        let mut tc = DMatrix::zeros(n, n);
        let mut row = h.clone();
        for i in 0..n {
            tc.set_row(i, &row.transpose());
            if i + 1 < n {
                row = sys.f.transpose() * row;
            }
        }
        let tc_inv = tc
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::numeric("flat structure", "regulator transform singular"))?;
        let tcf = &tc * &sys.f;
        let e_tcf: DVector<f64> = tcf.row(n - 1).transpose().into_owned();
        let last = (e_tcf.transpose() * &tc_inv).transpose();
        let mut p1 = vec![0.0; n + 1];
        for d in 0..n {
            p1[d] = -last[d];
        }
        p1[n] = 1.0;
        let c_row = (sys.c.transpose() * &tc_inv).transpose().into_owned();
        let mut p2 = vec![0.0; n + 1];
        for d in 0..=n {
            p2[d] = sys.q0 * p1[d] + if d < n { c_row[d] } else { 0.0 };
        }
        Ok(Self {
            n,
            tc,
            tc_inv,
            h,
            p1,
            p2,
            e_tcf,
            c_row,
        })
    }
}

/// Uniform grids on the delay intervals `[0, τ₁]` and `[0, τ₂]`, glued into
/// the window `[−τ₂, τ₁]` with a node exactly at `0`.
#[derive(Debug, Clone, Copy)]
pub struct TauGrid {
    /// Advance horizon `τ₁`.
    pub tau1: f64,
    /// Delay horizon `τ₂`.
    pub tau2: f64,
    /// Intervals on the `[0, τ₁]` side.
    pub n1: usize,
    /// Intervals on the `[−τ₂, 0]` side.
    pub n2: usize,
}

impl TauGrid {
    /// Grid with `intervals` steps per side, matched to the travel times.
    pub fn new(ch: &CharacteristicMap, intervals: usize) -> Self {
        Self {
            tau1: ch.tau1,
            tau2: ch.tau2,
            n1: intervals.max(8),
            n2: intervals.max(8),
        }
    }

    /// Step on the advance side.
    #[inline]
    pub fn h1(&self) -> f64 {
        self.tau1 / self.n1 as f64
    }

    /// Step on the delay side.
    #[inline]
    pub fn h2(&self) -> f64 {
        self.tau2 / self.n2 as f64
    }

    /// Node `τ_j = j·h1` of the advance side.
    #[inline]
    pub fn pos_node(&self, j: usize) -> f64 {
        j as f64 * self.h1()
    }

    /// Node `−τ₂ + k·h2` of the delay side.
    #[inline]
    pub fn neg_node(&self, k: usize) -> f64 {
        -self.tau2 + k as f64 * self.h2()
    }
}

/// A function on the window `[−τ₂, τ₁]`, stored on the two half-grids with
/// the node at `0` duplicated (so one-sided supports stay exact).
#[derive(Debug, Clone)]
pub struct TwoSided {
    /// The grid.
    pub grid: TauGrid,
    /// Values at `−τ₂ + k·h2`, `k = 0..=n2` (last entry is `τ = 0⁻`).
    pub neg: Vec<f64>,
    /// Values at `j·h1`, `j = 0..=n1` (first entry is `τ = 0⁺`).
    pub pos: Vec<f64>,
}

impl TwoSided {
    /// The zero function.
    pub fn zeros(grid: TauGrid) -> Self {
        Self {
            grid,
            neg: vec![0.0; grid.n2 + 1],
            pos: vec![0.0; grid.n1 + 1],
        }
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: TauGrid, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            grid,
            neg: (0..=grid.n2).map(|k| f(grid.neg_node(k))).collect(),
            pos: (0..=grid.n1).map(|j| f(grid.pos_node(j))).collect(),
        }
    }

    /// Linear interpolation (clamped to the window).
    pub fn eval(&self, tau: f64) -> f64 {
        if tau < 0.0 {
            interp_uniform(-self.grid.tau2, self.grid.h2(), &self.neg, tau)
        } else {
            interp_uniform(0.0, self.grid.h1(), &self.pos, tau)
        }
    }

    /// Adds `s·other` nodewise.
    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        for (a, b) in self.neg.iter_mut().zip(&other.neg) {
            *a += s * b;
        }
        for (a, b) in self.pos.iter_mut().zip(&other.pos) {
            *a += s * b;
        }
    }

    /// Adds `s·f(τ)` nodewise.
    pub fn add_fn(&mut self, mut f: impl FnMut(f64) -> f64, s: f64) {
        for k in 0..self.neg.len() {
            self.neg[k] += s * f(self.grid.neg_node(k));
        }
        for j in 0..self.pos.len() {
            self.pos[j] += s * f(self.grid.pos_node(j));
        }
    }

    /// Trapezoid integral `∫ f(τ)·g(τ) dτ` against a nodewise factor.
    pub fn integrate_with(&self, mut g: impl FnMut(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        let n_neg = self.neg.len();
        for (k, v) in self.neg.iter().enumerate() {
            acc += self.grid.h2() * trapezoid_weight(k, n_neg) * v * g(self.grid.neg_node(k));
        }
        let n_pos = self.pos.len();
        for (j, v) in self.pos.iter().enumerate() {
            acc += self.grid.h1() * trapezoid_weight(j, n_pos) * v * g(self.grid.pos_node(j));
        }
        acc
    }

    /// `∫ (anchor − τ)^p f(τ) dτ` over the window.
    fn integrate_weighted(&self, p: usize, anchor: f64) -> f64 {
        self.integrate_with(|tau| (anchor - tau).powi(p as i32))
    }

    /// The running moment `g(σ) = ∫_{−τ₂}^{σ} (σ − τ)^p f(τ) dτ` at every
    /// node.
    fn cumulative_weighted(&self, p: usize) -> Self {
        let grid = self.grid;
        let mut out = Self::zeros(grid);
        let pw = |x: f64| x.powi(p as i32);
        // Negative-side targets: integrate over neg nodes 0..=k.
        for k in 0..self.neg.len() {
            let sigma = grid.neg_node(k);
            let mut acc = 0.0;
            for (l, v) in self.neg.iter().enumerate().take(k + 1) {
                let w = trapezoid_weight(l, k + 1);
                acc += w * v * pw(sigma - grid.neg_node(l));
            }
            out.neg[k] = grid.h2() * acc;
        }
        // Positive-side targets: the whole negative side plus pos nodes 0..=j.
        for j in 0..self.pos.len() {
            let sigma = grid.pos_node(j);
            let mut acc = 0.0;
            for (l, v) in self.neg.iter().enumerate() {
                let w = trapezoid_weight(l, self.neg.len());
                acc += grid.h2() * w * v * pw(sigma - grid.neg_node(l));
            }
            for (l, v) in self.pos.iter().enumerate().take(j + 1) {
                let w = trapezoid_weight(l, j + 1);
                acc += grid.h1() * w * v * pw(sigma - grid.pos_node(l));
            }
            out.pos[j] = acc;
        }
        out
    }
}

/// Where a point evaluation sits relative to the current time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AtomShift {
    /// At the advanced time `t + τ₁`.
    Advance,
    /// At the delayed time `t − τ₂`.
    Delay,
}

/// A weighted point evaluation `weight · y^{(order)}(t ± τ)`.
#[derive(Debug, Clone, Copy)]
pub struct Atom {
    /// Multiplier.
    pub weight: f64,
    /// Derivative order.
    pub order: usize,
    /// Advanced or delayed evaluation point.
    pub shift: AtomShift,
}

/// A distributed term `∫ f(τ) y^{(order)}(t+τ) dτ`.
#[derive(Debug, Clone)]
pub struct DistributedTerm {
    /// Derivative order of the signal under the integral.
    pub order: usize,
    /// Weight function on the window.
    pub values: TwoSided,
}

/// A linear functional of a signal: point evaluations plus distributed
/// terms over the window `[−τ₂, τ₁]`.
#[derive(Debug, Clone)]
pub struct InputFunctional {
    /// Highest derivative order that occurs.
    pub n: usize,
    /// The window grid.
    pub grid: TauGrid,
    /// Point evaluations.
    pub atoms: Vec<Atom>,
    /// Distributed terms.
    pub distributed: Vec<DistributedTerm>,
}

impl InputFunctional {
    /// The input functional of the plant: evaluating the actuated-end
    /// condition on the flat parametrization gives
    ///
    /// ```text
    /// ū(t) = p₁ᵀy^{[n]}(t+τ₁) − q̄₁ p₂ᵀy^{[n]}(t−τ₂)
    ///        − ∫₀^{τ₁} e₁ᵀC(ψ₁(τ₁−τ)) T_c⁻¹ y^{[n−1]}(t+τ) dτ
    ///        − q̄₁ ∫_{−τ₂}^{0} e₂ᵀC(ψ₂(τ₂+τ)) T_c⁻¹ y^{[n−1]}(t+τ) dτ.
    /// ```
    pub fn plant(fs: &FlatStructure, dec: &Decoupling, grid: TauGrid) -> Self {
        let n = fs.n;
        let q1b = dec.scaling.q1_bar;
        let mut atoms = Vec::with_capacity(2 * (n + 1));
        for d in 0..=n {
            atoms.push(Atom {
                weight: fs.p1[d],
                order: d,
                shift: AtomShift::Advance,
            });
            atoms.push(Atom {
                weight: -q1b * fs.p2[d],
                order: d,
                shift: AtomShift::Delay,
            });
        }
        let mut distributed = Vec::with_capacity(2 * n);
        for d in 0..n {
            // Advance-side weight: −[e₁ᵀC(ψ₁(τ₁−τ)) T_c⁻¹]_d on [0, τ₁].
            let mut pos_values = TwoSided::zeros(grid);
            for j in 0..=grid.n1 {
                let tau = grid.pos_node(j);
                let z = dec.chars.psi1_at(grid.tau1 - tau);
                pos_values.pos[j] = -dec.coupling1_at(z) * fs.c_row[d];
            }
            distributed.push(DistributedTerm {
                order: d,
                values: pos_values,
            });
            // Delay-side weight: −q̄₁[e₂ᵀC(ψ₂(τ₂+τ)) T_c⁻¹]_d on [−τ₂, 0].
            let mut neg_values = TwoSided::zeros(grid);
            for k in 0..=grid.n2 {
                let tau = grid.neg_node(k);
                let z = dec.chars.psi2_at(grid.tau2 + tau);
                neg_values.neg[k] = -q1b * dec.coupling2_at(z) * fs.c_row[d];
            }
            distributed.push(DistributedTerm {
                order: d,
                values: neg_values,
            });
        }
        Self {
            n,
            grid,
            atoms,
            distributed,
        }
    }

    /// Evaluates the functional on a signal.
    pub fn apply(&self, sig: &impl Signal) -> f64 {
        let mut acc = 0.0;
        for atom in &self.atoms {
            let offset = match atom.shift {
                AtomShift::Advance => self.grid.tau1,
                AtomShift::Delay => -self.grid.tau2,
            };
            acc += atom.weight * sig.derivative(atom.order, offset);
        }
        for d in &self.distributed {
            acc += d.values.integrate_with(|tau| sig.derivative(d.order, tau));
        }
        acc
    }

    /// Reduces the functional to canonical form by integration by parts.
    ///
    /// Rule 1 rewrites a distributed term of order `i < n` as advanced
    /// atoms of orders `i..n` plus an order-`n` distributed remainder
    /// (Taylor expansion of `y^{(i)}` around `t+τ₁` under the integral).
    /// Rule 2 rewrites an advanced atom of order `i < n` as delayed atoms
    /// plus an order-`n` distributed remainder (Taylor expansion around
    /// `t−τ₂`). Delayed atoms of any order are already canonical.
    pub fn reduce(&self) -> Result<CanonicalForm> {
        let n = self.n;
        let grid = self.grid;
        let mut a = vec![0.0; n + 1];
        let mut lead = 0.0;
        let mut density = TwoSided::zeros(grid);
        let mut advanced: Vec<(usize, f64)> = Vec::new();
        for atom in &self.atoms {
            if atom.order > n {
                return Err(Error::invalid_input("atom order exceeds the ODE order"));
            }
            match atom.shift {
                AtomShift::Delay => a[atom.order] += atom.weight,
                AtomShift::Advance => {
                    if atom.order == n {
                        lead += atom.weight;
                    } else {
                        advanced.push((atom.order, atom.weight));
                    }
                }
            }
        }
        for term in &self.distributed {
            let i = term.order;
            if i == n {
                density.add_scaled(&term.values, 1.0);
                continue;
            }
            // Rule 1: advanced atoms of orders k = i..n−1 …
            for k in i..n {
                let m = k - i;
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                let w = sign / factorial(m) * term.values.integrate_weighted(m, grid.tau1);
                advanced.push((k, w));
            }
            // … plus the order-n remainder.
            let g = term.values.cumulative_weighted(n - i - 1);
            let sign = if (n - i) % 2 == 0 { 1.0 } else { -1.0 };
            density.add_scaled(&g, sign / factorial(n - i - 1));
        }
        let span = grid.tau1 + grid.tau2;
        for (i, w) in advanced {
            // Rule 2: delayed atoms of orders k = i..n−1 …
            for k in i..n {
                a[k] += w * span.powi((k - i) as i32) / factorial(k - i);
            }
            // … plus the order-n remainder on the whole window.
            let p = n - i - 1;
            density.add_fn(|tau| (grid.tau1 - tau).powi(p as i32) / factorial(p), w);
        }
        if (lead - 1.0).abs() > 1e-9 {
            return Err(Error::numeric(
                "canonical reduction",
                format!("leading advanced coefficient is {lead}, expected 1"),
            ));
        }
        Ok(CanonicalForm {
            n,
            grid,
            a,
            lead,
            density,
        })
    }
}

/// The canonical input form
/// `ū(t) = lead·y^{(n)}(t+τ₁) + Σᵢ aᵢ y^{(i)}(t−τ₂) + ∫ a(τ) y^{(n)}(t+τ) dτ`.
#[derive(Debug, Clone)]
pub struct CanonicalForm {
    /// Highest derivative order `n`.
    pub n: usize,
    /// Window grid.
    pub grid: TauGrid,
    /// Delayed coefficients `a₀ … a_n`.
    pub a: Vec<f64>,
    /// Coefficient of the advanced top derivative (normalized to 1).
    pub lead: f64,
    /// Distributed order-`n` coefficient on `[−τ₂, τ₁]`.
    pub density: TwoSided,
}

impl CanonicalForm {
    /// The canonical form that enforces the target error dynamics
    /// `ε^{(n)} + Σ κᵢ ε^{(i)} = 0` with `ε(t) = e(t+τ₁) + γ e(t−τ₂)`:
    ///
    /// ```text
    /// ā(τ) = Σᵢ κᵢ (τ₁−τ)^{n−i−1}/(n−i−1)! ,
    /// āᵢ   = κᵢ γ + Σ_{k≤i} κ_k (τ₁+τ₂)^{i−k}/(i−k)! ,    ā_n = γ.
    /// ```
    pub fn target(grid: TauGrid, kappa: &[f64], gamma: f64) -> Self {
        let n = kappa.len();
        let span = grid.tau1 + grid.tau2;
        let mut a = vec![0.0; n + 1];
        a[n] = gamma;
        for i in 0..n {
            let mut v = kappa[i] * gamma;
            for k in 0..=i {
                v += kappa[k] * span.powi((i - k) as i32) / factorial(i - k);
            }
            a[i] = v;
        }
        let density = TwoSided::from_fn(grid, |tau| {
            let mut v = 0.0;
            for (i, ka) in kappa.iter().enumerate() {
                v += ka * (grid.tau1 - tau).powi((n - i - 1) as i32) / factorial(n - i - 1);
            }
            v
        });
        Self {
            n,
            grid,
            a,
            lead: 1.0,
            density,
        }
    }

    /// Evaluates the canonical functional on a signal.
    pub fn apply(&self, sig: &impl Signal) -> f64 {
        let mut acc = self.lead * sig.derivative(self.n, self.grid.tau1);
        for (i, ai) in self.a.iter().enumerate() {
            acc += ai * sig.derivative(i, -self.grid.tau2);
        }
        acc + self
            .density
            .integrate_with(|tau| sig.derivative(self.n, tau))
    }
}

/// Setpoint transition plan: constant `y0` until `t0`, a polynomial of
/// degree `2n+1` that connects the two rest points with `n` flat
/// derivatives, and constant `y_star` after `t_star`.
#[derive(Debug, Clone)]
pub struct ReferencePlan {
    /// Number of derivatives that vanish at both rest points.
    pub n: usize,
    /// Initial value.
    pub y0: f64,
    /// Final value.
    pub y_star: f64,
    /// Transition start.
    pub t0: f64,
    /// Transition end.
    pub t_star: f64,
    coeffs: Vec<f64>,
}

impl ReferencePlan {
    /// Plans a transition; requires `t_star > t0`.
    pub fn new(n: usize, y0: f64, y_star: f64, t0: f64, t_star: f64) -> Result<Self> {
        if !(t_star > t0) {
            return Err(Error::invalid_input(
                "reference transition must have t_star > t0",
            ));
        }
        // q(s) = Σ_{k=n+1}^{2n+1} c_k s^k with q(1) = 1, q^{(i)}(1) = 0.
        let dim = n + 1;
        let mut mat = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        rhs[0] = 1.0;
        for i in 0..dim {
            for m in 0..dim {
                let k = n + 1 + m;
                let mut falling = 1.0;
                for d in 0..i {
                    falling *= (k - d) as f64;
                }
                mat[(i, m)] = falling;
            }
        }
        let coeffs = mat
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::numeric("reference plan", "interpolation system singular"))?
            .iter()
            .copied()
            .collect();
        Ok(Self {
            n,
            y0,
            y_star,
            t0,
            t_star,
            coeffs,
        })
    }

    /// Evaluates `y_r^{(order)}(t)`.
    pub fn eval(&self, order: usize, t: f64) -> f64 {
        if t <= self.t0 {
            return if order == 0 { self.y0 } else { 0.0 };
        }
        if t >= self.t_star {
            return if order == 0 { self.y_star } else { 0.0 };
        }
        let dt = self.t_star - self.t0;
        let s = (t - self.t0) / dt;
        let mut q = 0.0;
        for (m, c) in self.coeffs.iter().enumerate() {
            let k = self.n + 1 + m;
            if order > k {
                continue;
            }
            let mut falling = 1.0;
            for d in 0..order {
                falling *= (k - d) as f64;
            }
            q += c * falling * s.powi((k - order) as i32);
        }
        let base = if order == 0 { self.y0 } else { 0.0 };
        base + (self.y_star - self.y0) * q / dt.powi(order as i32)
    }
}

/// [`Signal`] view of a reference plan anchored at time `t`.
#[derive(Debug, Clone, Copy)]
pub struct PlanAt<'a> {
    /// The plan.
    pub plan: &'a ReferencePlan,
    /// Anchor time.
    pub t: f64,
}

impl Signal for PlanAt<'_> {
    fn derivative(&self, order: usize, offset: f64) -> f64 {
        self.plan.eval(order, self.t + offset)
    }
}

/// Reconstructed canonical state at one sample time: the delayed derivative
/// stack and the window of the top derivative.
#[derive(Debug, Clone)]
pub struct CanonicalState {
    /// `y^{(i)}(t−τ₂)` for `i = 0..n`.
    pub lagged: DVector<f64>,
    /// `y^{(n)}(t+τ)` for `τ ∈ [−τ₂, τ₁]`.
    pub window: TwoSided,
}

impl Signal for CanonicalState {
    fn derivative(&self, order: usize, offset: f64) -> f64 {
        if order == self.lagged.len() {
            self.window.eval(offset)
        } else {
            debug_assert!((offset + self.window.grid.tau2).abs() < 1e-9);
            self.lagged[order]
        }
    }
}

/// Reconstructs the canonical state from `(ξ, x̄)` at each sample time by
/// integrating along characteristics.
///
/// The past ODE trajectory `ρ₂(τ) = ξ(t−τ)` and the predicted one
/// `ρ₁(τ) = ξ(t+τ)` each satisfy a Volterra equation of the second kind
/// with a convolution kernel assembled from `e^{±Fτ}` and the coupling
/// `C(z)`; the right-hand sides carry the current transport profiles
/// sampled along the characteristics. All kernels, matrix exponentials, and
/// factorizations are precomputed here — per step only the right-hand
/// sides, two forward substitutions, and the window assembly remain.
#[derive(Debug, Clone)]
pub struct CanonicalPredictor {
    n: usize,
    q0: f64,
    grid: TauGrid,
    z_step: f64,
    // Positions ψᵢ(τ_j) of the characteristics at the τ-nodes.
    psi1_pos: Vec<f64>,
    psi2_neg: Vec<f64>,
    // Coupling factors along the characteristics.
    c1_psi: Vec<f64>,
    c2_psi: Vec<f64>,
    // Matrix exponential tables e^{Fτ_j} (advance) and e^{−Fτ_j} (delay).
    exp_pf: Vec<DMatrix<f64>>,
    exp_mf: Vec<DMatrix<f64>>,
    // Single-step propagators and their action on b.
    exp_ph: DMatrix<f64>,
    exp_mh: DMatrix<f64>,
    exp_ph_b: DVector<f64>,
    exp_mh_b: DVector<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
    e_tcf: DVector<f64>,
    tc: DMatrix<f64>,
    solver1: Option<ConvolutionSolver>,
    solver2: Option<ConvolutionSolver>,
}

impl CanonicalPredictor {
    /// Builds the predictor tables for `sys` on the window grid.
    pub fn new(sys: &System, dec: &Decoupling, fs: &FlatStructure, grid: TauGrid) -> Result<Self> {
        let n = fs.n;
        let h1 = grid.h1();
        let h2 = grid.h2();
        let psi1_pos: Vec<f64> = (0..=grid.n1)
            .map(|j| dec.chars.psi1_at(grid.pos_node(j)))
            .collect();
        let psi2_neg: Vec<f64> = (0..=grid.n2)
            .map(|k| dec.chars.psi2_at(k as f64 * h2))
            .collect();
        let c1_psi: Vec<f64> = psi1_pos.iter().map(|&z| dec.coupling1_at(z)).collect();
        let c2_psi: Vec<f64> = psi2_neg.iter().map(|&z| dec.coupling2_at(z)).collect();
        if n == 0 {
            return Ok(Self {
                n,
                q0: sys.q0,
                grid,
                z_step: sys.grid().step(),
                psi1_pos,
                psi2_neg,
                c1_psi,
                c2_psi,
                exp_pf: Vec::new(),
                exp_mf: Vec::new(),
                exp_ph: DMatrix::zeros(0, 0),
                exp_mh: DMatrix::zeros(0, 0),
                exp_ph_b: DVector::zeros(0),
                exp_mh_b: DVector::zeros(0),
                b: DVector::zeros(0),
                c: DVector::zeros(0),
                e_tcf: DVector::zeros(0),
                tc: DMatrix::zeros(0, 0),
                solver1: None,
                solver2: None,
            });
        }
        let exp_ph = expm(&(&sys.f * h1));
        let exp_mh = expm(&(-&sys.f * h2));
        let mut exp_pf = Vec::with_capacity(grid.n1 + 1);
        exp_pf.push(DMatrix::identity(n, n));
        for j in 1..=grid.n1 {
            let next = &exp_ph * &exp_pf[j - 1];
            exp_pf.push(next);
        }
        let mut exp_mf = Vec::with_capacity(grid.n2 + 1);
        exp_mf.push(DMatrix::identity(n, n));
        for k in 1..=grid.n2 {
            let next = &exp_mh * &exp_mf[k - 1];
            exp_mf.push(next);
        }
        let bc_t = &sys.b * sys.c.transpose();

        // Kernel of the prediction equation:
        // C̄₁(τ_j) = ∫₀^{τ_j} e^{F(τ_j−w)} (b cᵀ) coupling1(ψ₁(w)) dw.
        let mut cbar1: Vec<DMatrix<f64>> = Vec::with_capacity(grid.n1 + 1);
        cbar1.push(DMatrix::zeros(n, n));
        for j in 1..=grid.n1 {
            let prev = &cbar1[j - 1];
            let inc = 0.5 * h1 * (&exp_ph * &bc_t * c1_psi[j - 1] + &bc_t * c1_psi[j]);
            cbar1.push(&exp_ph * prev + inc);
        }
        // Kernel of the history equation:
        // C̄₂(τ_k) = e^{−Fτ_k}(bcᵀ)/q₀
        //           + (1/q₀)∫₀^{τ_k} e^{−F(τ_k−w)} (bcᵀ) coupling2(ψ₂(w)) dw.
        let mut cbar2: Vec<DMatrix<f64>> = Vec::with_capacity(grid.n2 + 1);
        cbar2.push(&bc_t / sys.q0);
        for k in 1..=grid.n2 {
            let integral_prev = &cbar2[k - 1] - &exp_mf[k - 1] * &bc_t / sys.q0;
            let inc = 0.5 * h2 / sys.q0 * (&exp_mh * &bc_t * c2_psi[k - 1] + &bc_t * c2_psi[k]);
            cbar2.push(&exp_mf[k] * &bc_t / sys.q0 + &exp_mh * integral_prev + inc);
        }
        let neg_cbar1: Vec<DMatrix<f64>> = cbar1.iter().map(|m| -m).collect();
        let neg_cbar2: Vec<DMatrix<f64>> = cbar2.iter().map(|m| -m).collect();
        let solver1 = ConvolutionSolver::new(DMatrix::identity(n, n), neg_cbar1, h1)?;
        let solver2 = ConvolutionSolver::new(DMatrix::identity(n, n), neg_cbar2, h2)?;
        Ok(Self {
            n,
            q0: sys.q0,
            grid,
            z_step: sys.grid().step(),
            psi1_pos,
            psi2_neg,
            c1_psi,
            c2_psi,
            exp_pf,
            exp_mf,
            exp_ph_b: &exp_ph * &sys.b,
            exp_mh_b: &exp_mh * &sys.b,
            exp_ph,
            exp_mh,
            b: sys.b.clone(),
            c: sys.c.clone(),
            e_tcf: fs.e_tcf.clone(),
            tc: fs.tc.clone(),
            solver1: Some(solver1),
            solver2: Some(solver2),
        })
    }

    /// The window grid.
    #[inline]
    pub fn grid(&self) -> TauGrid {
        self.grid
    }

    /// Reconstructs the canonical state from the ODE state and the
    /// transformed transport profiles (on the z-grid).
    pub fn state(&self, xi: &DVector<f64>, xbar1: &[f64], xbar2: &[f64]) -> Result<CanonicalState> {
        let grid = self.grid;
        let h1 = grid.h1();
        let h2 = grid.h2();
        // Profile samples along the characteristics.
        let f1: Vec<f64> = self
            .psi1_pos
            .iter()
            .map(|&z| interp_uniform(0.0, self.z_step, xbar1, z))
            .collect();
        let f2: Vec<f64> = self
            .psi2_neg
            .iter()
            .map(|&z| interp_uniform(0.0, self.z_step, xbar2, z))
            .collect();
        if self.n == 0 {
            // Without an ODE the signal is the boundary trace itself:
            // y^{(0)}(t+τ) = x̄₁(ψ₁(τ)) ahead, x̄₂(ψ₂(−τ))/q₀ behind.
            let mut window = TwoSided::zeros(grid);
            window.pos.copy_from_slice(&f1);
            for k in 0..=grid.n2 {
                window.neg[k] = f2[grid.n2 - k] / self.q0;
            }
            window.neg[grid.n2] = window.pos[0];
            return Ok(CanonicalState {
                lagged: DVector::zeros(0),
                window,
            });
        }

        // Prediction side: ρ₁(τ) − ∫₀^τ C̄₁(τ−σ)ρ₁(σ)dσ
        //                   = e^{Fτ}ξ + ∫₀^τ e^{F(τ−s)} b x̄₁(ψ₁(s)) ds.
        let mut rhs1: Vec<DVector<f64>> = Vec::with_capacity(grid.n1 + 1);
        let mut g1 = DVector::zeros(self.n);
        rhs1.push(xi.clone());
        for j in 1..=grid.n1 {
            g1 = &self.exp_ph * &g1;
            g1 += 0.5 * h1 * (&self.exp_ph_b * f1[j - 1] + &self.b * f1[j]);
            rhs1.push(&self.exp_pf[j] * xi + &g1);
        }
        let rho1 = self
            .solver1
            .as_ref()
            .expect("predictor with ODE state")
            .solve(&rhs1)?;

        // History side: ρ₂(τ) − ∫₀^τ C̄₂(τ−σ)ρ₂(σ)dσ
        //                = e^{−Fτ}ξ − (1/q₀)∫₀^τ e^{−F(τ−s)} b x̄₂(ψ₂(s)) ds.
        let mut rhs2: Vec<DVector<f64>> = Vec::with_capacity(grid.n2 + 1);
        let mut g2 = DVector::zeros(self.n);
        rhs2.push(xi.clone());
        for k in 1..=grid.n2 {
            g2 = &self.exp_mh * &g2;
            g2 += 0.5 * h2 * (&self.exp_mh_b * f2[k - 1] + &self.b * f2[k]);
            rhs2.push(&self.exp_mf[k] * xi - &g2 / self.q0);
        }
        let rho2 = self
            .solver2
            .as_ref()
            .expect("predictor with ODE state")
            .solve(&rhs2)?;

        // Window assembly. Ahead of t (σ = τ_j ≥ 0):
        // y^{(n)}(t+σ) = x̄₁(ψ₁(σ)) + ∫₀^σ coupling1(ψ₁(σ−s))·cᵀρ₁(s) ds
        //                + e_tcf·ρ₁(σ).
        let c_rho1: Vec<f64> = rho1.iter().map(|r| self.c.dot(r)).collect();
        let mut window = TwoSided::zeros(grid);
        for j in 0..=grid.n1 {
            let mut conv = 0.0;
            for s in 0..=j {
                let w = trapezoid_weight(s, j + 1);
                conv += w * self.c1_psi[j - s] * c_rho1[s];
            }
            window.pos[j] = f1[j] + h1 * conv + self.e_tcf.dot(&rho1[j]);
        }
        // Behind t (σ = −τ_k ≤ 0):
        // y^{(n)}(t−τ) = (1/q₀)[x̄₂(ψ₂(τ)) − cᵀρ₂(τ)
        //                − ∫₀^τ coupling2(ψ₂(s))·cᵀρ₂(τ−s) ds] + e_tcf·ρ₂(τ).
        let c_rho2: Vec<f64> = rho2.iter().map(|r| self.c.dot(r)).collect();
        for k in 0..=grid.n2 {
            let mut conv = 0.0;
            for s in 0..=k {
                let w = trapezoid_weight(s, k + 1);
                conv += w * self.c2_psi[s] * c_rho2[k - s];
            }
            let val = (f2[k] - c_rho2[k] - h2 * conv) / self.q0 + self.e_tcf.dot(&rho2[k]);
            window.neg[grid.n2 - k] = val;
        }
        // At σ = 0 the prediction side is exact by construction.
        window.neg[grid.n2] = window.pos[0];

        let lagged = &self.tc * &rho2[grid.n2];
        Ok(CanonicalState { lagged, window })
    }
}

/// Samples the state consistent with a signal `y` at the signal's anchor
/// time: the ODE state `ξ = T_c⁻¹ y^{[n−1]}` and the transformed transport
/// profiles obtained by propagating the boundary traces along the
/// characteristics,
///
/// ```text
/// x̄₁(z) = p₁ᵀy^{[n]}(φ₁(z)) − ∫₀ᶻ (e₁ᵀC(ζ)/λ₁(ζ)) T_c⁻¹ y^{[n−1]}(φ₁(z)−φ₁(ζ)) dζ,
/// x̄₂(z) = p₂ᵀy^{[n]}(−φ₂(z)) + ∫₀ᶻ (e₂ᵀC(ζ)/λ₂(ζ)) T_c⁻¹ y^{[n−1]}(−φ₂(z)+φ₂(ζ)) dζ.
/// ```
pub fn parametrize(
    sys: &System,
    dec: &Decoupling,
    fs: &FlatStructure,
    sig: &impl Signal,
) -> (DVector<f64>, Vec<f64>, Vec<f64>) {
    let n = fs.n;
    let stack = DVector::from_fn(n, |i, _| sig.derivative(i, 0.0));
    let xi = &fs.tc_inv * stack;
    let zs = sys.grid();
    let h = zs.step();
    let mut xbar1 = Vec::with_capacity(zs.len());
    let mut xbar2 = Vec::with_capacity(zs.len());
    for (j, z) in zs.nodes().enumerate() {
        let t1 = dec.chars.phi1_at(z);
        let t2 = dec.chars.phi2_at(z);
        let mut v1: f64 = (0..=n).map(|d| fs.p1[d] * sig.derivative(d, t1)).sum();
        let mut v2: f64 = (0..=n).map(|d| fs.p2[d] * sig.derivative(d, -t2)).sum();
        for (i, zeta) in zs.nodes().enumerate().take(j + 1) {
            let w = h * trapezoid_weight(i, j + 1);
            let y1: f64 = (0..n)
                .map(|d| fs.c_row[d] * sig.derivative(d, t1 - dec.chars.phi1_at(zeta)))
                .sum();
            let y2: f64 = (0..n)
                .map(|d| fs.c_row[d] * sig.derivative(d, -t2 + dec.chars.phi2_at(zeta)))
                .sum();
            v1 -= w * dec.coupling1_at(zeta) / sys.lambda1_at(zeta) * y1;
            v2 += w * dec.coupling2_at(zeta) / sys.lambda2_at(zeta) * y2;
        }
        xbar1.push(v1);
        xbar2.push(v2);
    }
    (xi, xbar1, xbar2)
}

/// Per-run sampler of the reference trajectory in transformed coordinates:
/// the ODE reference `ξ_r(t)` and the transport profiles `x̄_r(·,t)`.
///
/// Reference derivatives are tabulated once on a fine uniform time grid so
/// the `O(M²)` profile quadrature per sample stays cheap; the table step is
/// tied to the caller's time step so refinement studies converge cleanly.
#[derive(Debug, Clone)]
pub struct ReferenceSampler {
    fs: FlatStructure,
    /// The underlying plan.
    pub plan: ReferencePlan,
    phi1: Vec<f64>,
    phi2: Vec<f64>,
    q1: Vec<f64>,
    q2: Vec<f64>,
    h: f64,
    t_start: f64,
    t_step: f64,
    derivs: Vec<Vec<f64>>,
}

impl ReferenceSampler {
    /// Builds tables covering simulation times `[0, t_end]` with margin for
    /// the delay window; `dt` bounds the tabulation step.
    pub fn new(
        sys: &System,
        dec: &Decoupling,
        fs: &FlatStructure,
        plan: ReferencePlan,
        t_end: f64,
        dt: f64,
    ) -> Result<Self> {
        if !(dt > 0.0 && t_end > 0.0) {
            return Err(Error::invalid_input(
                "reference sampling needs positive dt and t_end",
            ));
        }
        let zs = sys.grid();
        let phi1: Vec<f64> = zs.nodes().map(|z| dec.chars.phi1_at(z)).collect();
        let phi2: Vec<f64> = zs.nodes().map(|z| dec.chars.phi2_at(z)).collect();
        let q1: Vec<f64> = zs
            .nodes()
            .map(|z| dec.coupling1_at(z) / sys.lambda1_at(z))
            .collect();
        let q2: Vec<f64> = zs
            .nodes()
            .map(|z| dec.coupling2_at(z) / sys.lambda2_at(z))
            .collect();
        let t_start = -dec.chars.tau2 - 2.0 * dt;
        let t_stop = t_end + dec.chars.tau1 + 2.0 * dt;
        let t_step = (dt / 2.0).min(1e-2);
        let count = ((t_stop - t_start) / t_step).ceil() as usize + 2;
        let derivs = (0..=fs.n)
            .map(|d| {
                (0..count)
                    .map(|m| plan.eval(d, t_start + m as f64 * t_step))
                    .collect()
            })
            .collect();
        Ok(Self {
            fs: fs.clone(),
            plan,
            phi1,
            phi2,
            q1,
            q2,
            h: zs.step(),
            t_start,
            t_step,
            derivs,
        })
    }

    #[inline]
    fn y(&self, d: usize, t: f64) -> f64 {
        interp_uniform(self.t_start, self.t_step, &self.derivs[d], t)
    }

    /// `ξ_r(t) = T_c⁻¹ y_r^{[n−1]}(t)` (evaluated exactly from the plan).
    pub fn ode_state(&self, t: f64) -> DVector<f64> {
        let stack = DVector::from_fn(self.fs.n, |i, _| self.plan.eval(i, t));
        &self.fs.tc_inv * stack
    }

    /// Transformed reference profiles `x̄_r(·,t)` on the z-grid.
    pub fn profiles(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let fs = &self.fs;
        let n = fs.n;
        let m = self.phi1.len();
        let mut xbar1 = vec![0.0; m];
        let mut xbar2 = vec![0.0; m];
        for j in 0..m {
            let t1 = t + self.phi1[j];
            let t2 = t - self.phi2[j];
            let mut v1: f64 = (0..=n).map(|d| fs.p1[d] * self.y(d, t1)).sum();
            let mut v2: f64 = (0..=n).map(|d| fs.p2[d] * self.y(d, t2)).sum();
            for i in 0..=j {
                let w = self.h * trapezoid_weight(i, j + 1);
                let y1: f64 = (0..n)
                    .map(|d| fs.c_row[d] * self.y(d, t1 - self.phi1[i]))
                    .sum();
                let y2: f64 = (0..n)
                    .map(|d| fs.c_row[d] * self.y(d, t2 + self.phi2[i]))
                    .sum();
                v1 -= w * self.q1[i] * y1;
                v2 += w * self.q2[i] * y2;
            }
            xbar1[j] = v1;
            xbar2[j] = v2;
        }
        (xbar1, xbar2)
    }
}

/// Returns human-readable warnings when the tuning `(κ, γ)` cannot yield a
/// stable loop: the window weight `γ` must satisfy `|γ| < 1` and the target
/// polynomial `s^n + Σ κᵢ sⁱ` must be Hurwitz.
pub fn stability_warnings(kappa: &[f64], gamma: f64) -> Vec<String> {
    let mut warnings = Vec::new();
    if gamma.abs() >= 1.0 {
        warnings.push(format!(
            "window weight gamma = {gamma} has |gamma| >= 1; the delayed error feedback is unstable"
        ));
    }
    let n = kappa.len();
    if n > 0 {
        let mut companion = DMatrix::zeros(n, n);
        for i in 0..n - 1 {
            companion[(i, i + 1)] = 1.0;
        }
        for (i, k) in kappa.iter().enumerate() {
            companion[(n - 1, i)] = -k;
        }
        let eigs = companion.complex_eigenvalues();
        if eigs.iter().any(|e| e.re >= -1e-12) {
            warnings.push(format!(
                "target polynomial with coefficients {kappa:?} is not Hurwitz"
            ));
        }
    }
    warnings
}

/// Complete flat tracking controller: feedforward along a planned
/// transition plus predictive feedback matching the canonical form against
/// the target error dynamics.
#[derive(Debug, Clone)]
pub struct FlatController {
    /// Canonical form of the plant.
    pub plant_form: CanonicalForm,
    /// Canonical form of the target dynamics.
    pub target_form: CanonicalForm,
    /// State reconstructor.
    pub predictor: CanonicalPredictor,
    /// Reference transition.
    pub plan: ReferencePlan,
    delta_a: Vec<f64>,
    delta_density: TwoSided,
}

impl FlatController {
    /// Assembles the controller; `kappa` are the target-polynomial
    /// coefficients (length `n`) and `gamma` the delayed-error weight.
    pub fn new(
        sys: &System,
        dec: &Decoupling,
        plan: ReferencePlan,
        kappa: &[f64],
        gamma: f64,
        intervals: usize,
    ) -> Result<Self> {
        let fs = FlatStructure::new(sys)?;
        if kappa.len() != fs.n {
            return Err(Error::invalid_input(format!(
                "target polynomial needs {} coefficients, got {}",
                fs.n,
                kappa.len()
            )));
        }
        let grid = TauGrid::new(&dec.chars, intervals);
        let plant_form = InputFunctional::plant(&fs, dec, grid).reduce()?;
        let target_form = CanonicalForm::target(grid, kappa, gamma);
        let predictor = CanonicalPredictor::new(sys, dec, &fs, grid)?;
        let delta_a: Vec<f64> = plant_form
            .a
            .iter()
            .zip(&target_form.a)
            .map(|(p, t)| p - t)
            .collect();
        let mut delta_density = plant_form.density.clone();
        delta_density.add_scaled(&target_form.density, -1.0);
        Ok(Self {
            plant_form,
            target_form,
            predictor,
            plan,
            delta_a,
            delta_density,
        })
    }

    /// Feedforward input `ū_r(t)` along the planned reference.
    pub fn feedforward(&self, t: f64) -> f64 {
        self.plant_form.apply(&PlanAt {
            plan: &self.plan,
            t,
        })
    }

    /// Full control law at time `t` for the current ODE state and
    /// transformed profiles:
    /// `ū = ū_r + Σᵢ (aᵢ−āᵢ)(y^{(i)} − y_r^{(i)})(t−τ₂)
    ///        + ∫ (a−ā)(τ)(y^{(n)} − y_r^{(n)})(t+τ) dτ`.
    /// (The advanced atoms cancel, so no future values are needed.)
    pub fn control(&self, t: f64, xi: &DVector<f64>, xbar1: &[f64], xbar2: &[f64]) -> Result<f64> {
        let state = self.predictor.state(xi, xbar1, xbar2)?;
        Ok(self.control_from_state(t, &state))
    }

    /// Control law when the canonical state is already available.
    pub fn control_from_state(&self, t: f64, state: &CanonicalState) -> f64 {
        let n = self.plant_form.n;
        let grid = self.plant_form.grid;
        let mut u = self.feedforward(t);
        for (i, da) in self.delta_a.iter().enumerate().take(n) {
            u += da * (state.lagged[i] - self.plan.eval(i, t - grid.tau2));
        }
        u += self.delta_a[n] * (state.window.eval(-grid.tau2) - self.plan.eval(n, t - grid.tau2));
        u += self
            .delta_density
            .integrate_with(|tau| state.window.eval(tau) - self.plan.eval(n, t + tau));
        u
    }
}
