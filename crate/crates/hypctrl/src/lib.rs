//! Tracking control of boundary-actuated 2x2 hyperbolic transport systems
//! coupled to an ODE at the unactuated boundary.
//!
//! The plant class is a pair of counter-propagating transport equations on
//! `z ∈ [0, 1]` with space-varying speeds and lower-order coupling,
//!
//! ```text
//! ξ̇(t)      = F ξ(t) + b x₁(0, t)                (ODE at z = 0)
//! x₂(0, t)  = q₀ x₁(0, t) + cᵀ ξ(t)              (reflection at z = 0)
//! ∂ₜx(z, t) = Λ(z) ∂_z x(z, t) + A(z) x(z, t)    (Λ = diag(λ₁, −λ₂))
//! x₁(1, t)  = q₁ x₂(1, t) + u(t)                 (actuated end, z = 1)
//! ```
//!
//! where `x₁` travels toward `z = 0` and `x₂` toward `z = 1`. The crate
//! implements the full design chain for this class:
//!
//! * [`model`] — plant description, characteristic (travel-time) maps, the
//!   heavy-rope benchmark system;
//! * [`volterra`] — product-trapezoid solver for Volterra integral equations
//!   of the second kind (scalar and matrix);
//! * [`transforms`] — the scaling transform that removes diagonal coupling
//!   and the integral state transform (with kernel solver) that moves all
//!   in-domain coupling into the ODE state;
//! * [`flatness`] — flat parametrization of states and input, reduction of
//!   the input functional to a canonical delay–advance form, rest-to-rest
//!   trajectory planning, feedforward, and the predictor-based tracking
//!   feedback;
//! * [`backstepping`] — state-feedback design on the transformed system
//!   (gain placement, ODE decoupling profile, scalar decoupling kernels) that
//!   realizes the same closed loop from the state-space side;
//! * [`simulator`] — a semi-Lagrangian closed-loop simulator with metrics
//!   and reproducible CSV/JSON outputs;
//! * [`scenario`] — JSON scenario schema tying everything together;
//! * [`cli`] — the `hypctrl` command-line interface.

pub mod backstepping;
pub mod cli;
pub mod flatness;
pub mod model;
pub mod numerics;
pub mod scenario;
pub mod simulator;
pub mod transforms;
pub mod volterra;

/// The user guide (`book/`), mounted as documentation so that every code
/// snippet in it compiles and runs as a doc-test.
pub mod guide {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub mod overview {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/transforms.md")]
    pub mod transforms {}
    #[doc = include_str!("../../../book/src/flatness.md")]
    pub mod flatness {}
    #[doc = include_str!("../../../book/src/backstepping.md")]
    pub mod backstepping {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}

use std::fmt;

/// Errors produced by model construction, numerical routines, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid user-supplied data: malformed tables, bad config values,
    /// violated preconditions that a caller can fix.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A numerical routine failed to produce a usable result (divergence,
    /// singular system, tolerance not reached).
    #[error("numeric failure in {context}: {message}")]
    Numeric {
        /// Which computation failed.
        context: &'static str,
        /// What went wrong.
        message: String,
    },
    /// Filesystem or serialization failure while reading configs or writing
    /// results.
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed JSON in a scenario file.
    #[error("config parse failure: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid_input(msg: impl fmt::Display) -> Self {
        Error::InvalidInput(msg.to_string())
    }

    pub(crate) fn numeric(context: &'static str, msg: impl fmt::Display) -> Self {
        Error::Numeric {
            context,
            message: msg.to_string(),
        }
    }

    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// numerical failures (I/O counts as configuration here).
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::InvalidInput(_) | Error::Io(_) | Error::Json(_) => 2,
            Error::Numeric { .. } => 3,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;
