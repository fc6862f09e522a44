//! Scenario files: self-contained JSON descriptions of a closed-loop run.
//!
//! A scenario fixes the plant (built-in heavy-rope benchmark or a custom
//! system from sampled coefficient tables), the discretization, the initial
//! data, the controller and its tuning, the reference transition, and the
//! output selection. [`Scenario::build`] turns a parsed file into the
//! immutable artifacts the simulator consumes.

use serde::{Deserialize, Serialize};

use crate::flatness::{FlatStructure, ReferencePlan};
use crate::model::{Grid, HeavyRopeParams, System};
use crate::simulator::{ControllerSpec, SimConfig};
use crate::transforms::Decoupling;
use crate::{Error, Result};

/// A scalar function of `z` given by samples on `[0, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampledTable {
    /// Strictly increasing abscissae covering `[0, 1]`.
    pub z: Vec<f64>,
    /// Sample values.
    pub value: Vec<f64>,
}

impl SampledTable {
    fn validate(&self, name: &str) -> Result<()> {
        if self.z.len() < 2 || self.z.len() != self.value.len() {
            return Err(Error::invalid_input(format!(
                "table '{name}' needs equally many z and value samples (at least 2)"
            )));
        }
        if !self.z.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::invalid_input(format!(
                "table '{name}' must have strictly increasing z samples"
            )));
        }
        if self.z[0] > 1e-12 || self.z[self.z.len() - 1] < 1.0 - 1e-12 {
            return Err(Error::invalid_input(format!(
                "table '{name}' must cover the interval [0, 1]"
            )));
        }
        if !self.value.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid_input(format!(
                "table '{name}' contains non-finite values"
            )));
        }
        Ok(())
    }

    /// Linear interpolation, clamped to the sample range.
    pub fn eval(&self, z: f64) -> f64 {
        let n = self.z.len();
        if z <= self.z[0] {
            return self.value[0];
        }
        if z >= self.z[n - 1] {
            return self.value[n - 1];
        }
        let j = self.z.partition_point(|&s| s <= z).min(n - 1);
        let (z0, z1) = (self.z[j - 1], self.z[j]);
        let w = (z - z0) / (z1 - z0);
        self.value[j - 1] * (1.0 - w) + self.value[j] * w
    }
}

/// Plant selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    /// Built-in heavy-rope benchmark; omitted parameters use the defaults.
    HeavyRope {
        #[serde(skip_serializing_if = "Option::is_none")]
        rho: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        ell: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        g: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        payload: Option<f64>,
    },
    /// Fully custom coefficients. The transport speeds and in-domain
    /// couplings are sampled tables; omitted couplings are zero.
    Custom {
        /// ODE matrix, row-major (`n` rows of `n` entries).
        f: Vec<Vec<f64>>,
        /// ODE input vector.
        b: Vec<f64>,
        /// ODE output row feeding the unactuated boundary.
        c: Vec<f64>,
        /// Reflection at the unactuated boundary (must be nonzero).
        q0: f64,
        /// Reflection at the actuated boundary.
        q1: f64,
        lambda1: SampledTable,
        lambda2: SampledTable,
        #[serde(skip_serializing_if = "Option::is_none")]
        a11: Option<SampledTable>,
        #[serde(skip_serializing_if = "Option::is_none")]
        a12: Option<SampledTable>,
        #[serde(skip_serializing_if = "Option::is_none")]
        a21: Option<SampledTable>,
        #[serde(skip_serializing_if = "Option::is_none")]
        a22: Option<SampledTable>,
    },
}

/// Spatial discretization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Number of intervals on `[0, 1]` (at least 8).
    pub m: usize,
}

/// Initial transport profiles.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileSpec {
    /// Both profiles zero.
    #[default]
    Zero,
    /// `x₁ = A sin³(2πz)`, `x₂ = −A sin³(2πz)` (the benchmark shape).
    SinCubed {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
    /// Explicit samples, resampled onto the grid.
    Table {
        z: Vec<f64>,
        x1: Vec<f64>,
        x2: Vec<f64>,
    },
}

fn default_amplitude() -> f64 {
    0.4
}

/// Initial data.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    /// Initial ODE state (empty = origin).
    #[serde(default)]
    pub xi: Vec<f64>,
    /// Initial transport profiles.
    #[serde(default)]
    pub profile: ProfileSpec,
}

/// Time discretization and initial data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    /// Time step (must be smaller than both travel times).
    pub dt: f64,
    /// Horizon.
    pub t_end: f64,
    #[serde(default)]
    pub initial: InitialSpec,
}

/// Controller selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    /// Zero input.
    None,
    /// Reference feedforward only.
    Feedforward,
    /// Canonical-delay-form tracking controller.
    Flatness,
    /// Backstepping tracking controller.
    Backstepping,
}

/// Controller block. `gamma` and `kappa` are the canonical tuning pair;
/// the backstepping parameters default to the matched values
/// `q̄_cl = −γ/q₀` and `k` from pole placement of `κ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerBlock {
    pub kind: ControllerKind,
    /// Weight of the delayed error in the target dynamics (`|γ| < 1`).
    #[serde(default)]
    pub gamma: f64,
    /// Coefficients of the target error polynomial `sⁿ + Σ κᵢ sⁱ`.
    #[serde(default)]
    pub kappa: Vec<f64>,
    /// Explicit closed-loop reflection for backstepping (overrides `γ`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q1_cl: Option<f64>,
    /// Explicit ODE gain for backstepping (overrides `κ`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain: Option<Vec<f64>>,
}

/// Units of the reference endpoints.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefCoordinates {
    /// Endpoints are steady-state values of `ξ₁`.
    #[default]
    Xi1,
    /// Endpoints are values of the flat output itself.
    Flat,
}

/// Reference transition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    /// Initial setpoint.
    pub y0: f64,
    /// Final setpoint.
    pub y_star: f64,
    /// Transition start (default: the advance delay `τ₁`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t0: Option<f64>,
    /// Transition end (default: `t_end − τ₂`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_star: Option<f64>,
    #[serde(default)]
    pub coordinates: RefCoordinates,
}

/// Output selection.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Output directory (a `--out` flag overrides this).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directory: Option<String>,
    /// Times at which to record full profiles.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    /// Start of the tail window for the tracking-error metric.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_tail_start: Option<f64>,
}

/// A complete run description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub system: SystemSpec,
    pub grid: GridSpec,
    pub sim: SimSpec,
    pub controller: ControllerBlock,
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

impl Scenario {
    /// Parses a scenario from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(text)?;
        sc.validate()?;
        Ok(sc)
    }

    /// Reads and parses a scenario file.
    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    fn validate(&self) -> Result<()> {
        if !(self.sim.dt > 0.0) || !self.sim.dt.is_finite() {
            return Err(Error::invalid_input("sim.dt must be positive"));
        }
        if !(self.sim.t_end > self.sim.dt) {
            return Err(Error::invalid_input("sim.t_end must exceed sim.dt"));
        }
        let c = &self.controller;
        match c.kind {
            ControllerKind::None | ControllerKind::Feedforward => {
                if c.q1_cl.is_some() || c.gain.is_some() {
                    return Err(Error::invalid_input(
                        "controller.q1_cl and controller.gain require a tracking controller",
                    ));
                }
            }
            ControllerKind::Flatness => {
                if c.q1_cl.is_some() || c.gain.is_some() {
                    return Err(Error::invalid_input(
                        "controller.q1_cl and controller.gain belong to the backstepping \
                         controller; tune flatness via gamma and kappa",
                    ));
                }
            }
            ControllerKind::Backstepping => {}
        }
        Ok(())
    }

    /// Returns a copy with the grid and time step refined by `factor`.
    pub fn refined(&self, factor: u32) -> Self {
        let mut sc = self.clone();
        if factor > 1 {
            sc.grid.m *= factor as usize;
            sc.sim.dt /= factor as f64;
        }
        sc
    }

    /// Builds the plant.
    pub fn build_system(&self) -> Result<System> {
        let grid = Grid::new(self.grid.m)?;
        match &self.system {
            SystemSpec::HeavyRope {
                rho,
                ell,
                g,
                payload,
            } => {
                let d = HeavyRopeParams::default();
                let params = HeavyRopeParams {
                    rho: rho.unwrap_or(d.rho),
                    ell: ell.unwrap_or(d.ell),
                    g: g.unwrap_or(d.g),
                    payload: payload.unwrap_or(d.payload),
                };
                if !(params.rho > 0.0 && params.ell > 0.0 && params.g > 0.0) {
                    return Err(Error::invalid_input(
                        "heavy-rope parameters rho, ell, g must be positive",
                    ));
                }
                if params.payload < 0.0 {
                    return Err(Error::invalid_input("heavy-rope payload must be >= 0"));
                }
                System::heavy_rope(params, grid)
            }
            SystemSpec::Custom {
                f,
                b,
                c,
                q0,
                q1,
                lambda1,
                lambda2,
                a11,
                a12,
                a21,
                a22,
            } => {
                let n = f.len();
                if f.iter().any(|row| row.len() != n) {
                    return Err(Error::invalid_input("system.f must be square"));
                }
                if b.len() != n || c.len() != n {
                    return Err(Error::invalid_input(
                        "system.b and system.c must match the dimension of system.f",
                    ));
                }
                lambda1.validate("lambda1")?;
                lambda2.validate("lambda2")?;
                for (name, t) in [("a11", a11), ("a12", a12), ("a21", a21), ("a22", a22)] {
                    if let Some(t) = t {
                        t.validate(name)?;
                    }
                }
                let fm = nalgebra::DMatrix::from_fn(n, n, |i, j| f[i][j]);
                let bv = nalgebra::DVector::from_column_slice(b);
                let cv = nalgebra::DVector::from_column_slice(c);
                let nodes: Vec<f64> = grid.nodes().collect();
                let sample = |t: &Option<SampledTable>| -> Vec<f64> {
                    match t {
                        Some(t) => nodes.iter().map(|&z| t.eval(z)).collect(),
                        None => vec![0.0; nodes.len()],
                    }
                };
                let l1: Vec<f64> = nodes.iter().map(|&z| lambda1.eval(z)).collect();
                let l2: Vec<f64> = nodes.iter().map(|&z| lambda2.eval(z)).collect();
                if l1.iter().chain(&l2).any(|&v| v <= 0.0) {
                    return Err(Error::invalid_input(
                        "transport speeds lambda1, lambda2 must be positive on [0, 1]",
                    ));
                }
                System::from_tables(
                    grid,
                    fm,
                    bv,
                    cv,
                    *q0,
                    *q1,
                    l1,
                    l2,
                    [sample(a11), sample(a12), sample(a21), sample(a22)],
                )
            }
        }
    }

    /// Resolves the controller block against a plant.
    pub fn resolve_controller(&self, sys: &System) -> Result<ControllerSpec> {
        let c = &self.controller;
        let check_kappa = || -> Result<Vec<f64>> {
            if c.kappa.len() != sys.ode_dim {
                return Err(Error::invalid_input(format!(
                    "controller.kappa needs {} coefficients for this system, got {}",
                    sys.ode_dim,
                    c.kappa.len()
                )));
            }
            Ok(c.kappa.clone())
        };
        Ok(match c.kind {
            ControllerKind::None => ControllerSpec::None,
            ControllerKind::Feedforward => ControllerSpec::Feedforward,
            ControllerKind::Flatness => ControllerSpec::Flatness {
                kappa: check_kappa()?,
                gamma: c.gamma,
            },
            ControllerKind::Backstepping => {
                let kappa = match &c.gain {
                    Some(gain) => {
                        if gain.len() != sys.ode_dim {
                            return Err(Error::invalid_input(format!(
                                "controller.gain needs {} entries for this system, got {}",
                                sys.ode_dim,
                                gain.len()
                            )));
                        }
                        c.kappa.clone()
                    }
                    None => check_kappa()?,
                };
                ControllerSpec::Backstepping {
                    kappa,
                    q1_cl: c.q1_cl.unwrap_or(-c.gamma / sys.q0),
                    gain: c.gain.clone(),
                }
            }
        })
    }

    /// Plans the reference transition, converting `ξ₁` endpoints to flat
    /// output units when requested.
    pub fn build_plan(&self, fs: &FlatStructure, tau1: f64, tau2: f64) -> Result<ReferencePlan> {
        let r = &self.reference;
        let (y0, y_star) = match r.coordinates {
            RefCoordinates::Flat => (r.y0, r.y_star),
            RefCoordinates::Xi1 => {
                if fs.n == 0 {
                    return Err(Error::invalid_input(
                        "reference coordinates 'xi1' need an ODE; use 'flat'",
                    ));
                }
                let s = fs.tc_inv[(0, 0)];
                if s.abs() < 1e-12 {
                    return Err(Error::invalid_input(
                        "xi_1 is not statically coupled to the flat output; \
                         give the reference in 'flat' coordinates",
                    ));
                }
                (r.y0 / s, r.y_star / s)
            }
        };
        let t0 = r.t0.unwrap_or(tau1);
        let t_star = r.t_star.unwrap_or(self.sim.t_end - tau2);
        if !(t_star > t0) {
            return Err(Error::invalid_input(format!(
                "reference transition must have t_star > t0 (got t0 = {t0}, t_star = {t_star})"
            )));
        }
        ReferencePlan::new(fs.n, y0, y_star, t0, t_star)
    }

    /// Samples the initial transport profiles on the grid.
    pub fn initial_profiles(&self, grid: &Grid) -> Result<(Vec<f64>, Vec<f64>)> {
        match &self.sim.initial.profile {
            ProfileSpec::Zero => Ok((vec![0.0; grid.len()], vec![0.0; grid.len()])),
            ProfileSpec::SinCubed { amplitude } => {
                let x1: Vec<f64> = grid
                    .nodes()
                    .map(|z| amplitude * (2.0 * std::f64::consts::PI * z).sin().powi(3))
                    .collect();
                let x2 = x1.iter().map(|v| -v).collect();
                Ok((x1, x2))
            }
            ProfileSpec::Table { z, x1, x2 } => {
                let t1 = SampledTable {
                    z: z.clone(),
                    value: x1.clone(),
                };
                let t2 = SampledTable {
                    z: z.clone(),
                    value: x2.clone(),
                };
                t1.validate("initial.profile.x1")?;
                t2.validate("initial.profile.x2")?;
                Ok((
                    grid.nodes().map(|zz| t1.eval(zz)).collect(),
                    grid.nodes().map(|zz| t2.eval(zz)).collect(),
                ))
            }
        }
    }

    /// Builds all run artifacts: the plant, the decoupling transform, and
    /// the simulator configuration.
    pub fn build(&self) -> Result<(System, Decoupling, SimConfig)> {
        let sys = self.build_system()?;
        sys.validate()?;
        let controller = self.resolve_controller(&sys)?;
        let xi0 = if self.sim.initial.xi.is_empty() {
            vec![0.0; sys.ode_dim]
        } else {
            if self.sim.initial.xi.len() != sys.ode_dim {
                return Err(Error::invalid_input(format!(
                    "initial.xi needs {} entries for this system, got {}",
                    sys.ode_dim,
                    self.sim.initial.xi.len()
                )));
            }
            self.sim.initial.xi.clone()
        };
        let (x10, x20) = self.initial_profiles(&sys.grid())?;
        let dec = Decoupling::new(&sys)?;
        let fs = FlatStructure::new(&sys)?;
        let plan = self.build_plan(&fs, dec.chars.tau1, dec.chars.tau2)?;
        let cfg = SimConfig {
            dt: self.sim.dt,
            t_end: self.sim.t_end,
            xi0,
            x10,
            x20,
            plan,
            controller,
            snapshot_times: self.output.snapshot_times.clone(),
            dual_eval: false,
            error_tail_start: self.output.error_tail_start,
        };
        Ok((sys, dec, cfg))
    }
}
