//! Differentiable-compute substrate.
//!
//! Everything here is a pure function of its inputs: forward passes, exact
//! analytic gradients, and optimizer updates are deterministic and
//! thread-agnostic (reductions always run in a fixed order). Training runs in
//! single precision; gradient-check suites instantiate the same networks in
//! double precision via [`network::Network::cast`].

pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod optim;
pub mod tensor;

pub use gradcheck::{grad_check, CheckReport, ParamCheck, ScalarLoss};
pub use layers::Layer;
pub use network::{ForwardTrace, Gradients, Network};
pub use optim::{apply_update, OptState, ParameterSet, UpdateRule};
pub use tensor::{softmax, softmax_1d, Scalar, Tensor};
