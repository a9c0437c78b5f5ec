//! White-box model-inversion attack toolkit for small image classifiers.
//!
//! The crate is organized around the attack pipeline:
//!
//! - [`diffcore`]: the differentiable-compute substrate (tensors, layers,
//!   exact gradients, optimizer rules, finite-difference gradient checking).
//! - [`data`]: dataset ingestion (IDX, CIFAR-10 binary, image folders, a
//!   deterministic synthetic digit corpus), disjoint private/public label
//!   splits, and reproducible batch streams.
//! - [`models`]: the architecture registry plus classifier training, soft
//!   labels, and penultimate-feature extraction.
//! - [`gantrain`]: the inversion-specific GAN (soft-label discriminator,
//!   feature-matching generator with entropy regularization) and the WGAN-GP
//!   baseline used by the per-point inversion attack.
//! - [`recovery`]: latent Gaussian recovery via the reparameterization trick
//!   and Monte Carlo gradient estimators, plus the per-point baseline search.
//! - [`metrics`]: attack accuracy, KNN feature distance, and filtered FID.
//! - [`harness`]: experiment configuration, orchestration, checkpointing,
//!   traces, reports, and image grids.

pub mod data;
pub mod diffcore;
pub mod error;
pub mod gantrain;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod recovery;

pub use error::{Error, Result};
