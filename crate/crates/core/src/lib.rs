//! Natural gradient descent and natural momentum methods for differentiably
//! parametrized function classes.
//!
//! A model `D: R^d -> V` is evaluated on a [`QuadratureSet`]; its parameter
//! Jacobian on the quadrature points (the [`TangentFeatures`]) spans the
//! tangent space at the current iterate. Every optimizer in [`optimizers`]
//! works with Gram matrices of these features, regularized pseudo-inverses
//! of them ([`natgrad`]), and the additive retraction `theta + delta`.
//!
//! The [`benchmarks`] module wires four problems (Mackey-Glass regression,
//! nine-cluster XOR classification and two collocation PDE problems), the
//! [`harness`] drives experiment matrices and writes CSV traces, and
//! [`oracles`] holds independent checks used by `natmo verify`.

pub mod benchmarks;
pub mod error;
pub mod harness;
pub mod losses;
pub mod models;
pub mod natgrad;
pub mod optimizers;
pub mod oracles;
pub mod quadrature;

pub use error::{NatmoError, Result};
pub use losses::{LossSpec, MetricChoice};
pub use models::{ModelSpec, ParameterVector, TangentFeatures};
pub use natgrad::{GramSystem, RegPolicy};
pub use optimizers::{Method, OptConfig, OptState};
pub use quadrature::QuadratureSet;
