//! Numerical core for verifying the gradient blindness of batch
//! standardization.
//!
//! Batch standardization centers and scales each feature row of a `D×n`
//! mini-batch using the batch's own statistics. The Jacobian of that map
//! annihilates two directions per row — the all-ones vector and the
//! standardized row itself — so any loss component whose per-row gradient
//! lies in their span produces *no* gradient on the layer's input during
//! training. This crate makes that mechanism checkable end to end:
//!
//! * [`numkit`] — small dense matrices/vectors with a deterministic
//!   reduction order, seeded Gaussian sampling, and the tolerance policy.
//! * [`normlayers`] — batch and per-sample (layer) standardization forwards,
//!   batch vs. population statistics, and the closed-form standardization
//!   Jacobian for both training and evaluation modes.
//! * [`taylor`] — second-order Taylor models of black-box scalar losses via
//!   finite differences, the batch-loss decomposition into constant /
//!   first-order / diagonal / off-diagonal terms, the projection split of
//!   the off-diagonal term into linearly-correlated and residual parts, and
//!   per-sample model averaging.
//! * [`blindcheck`] — the verification engine: analytic per-term gradients,
//!   propagation through the standardization Jacobian, zero/nonzero
//!   assertions with finite-difference cross-checks, and dominance ratios.
//! * [`experiments`] — desk-scale reproductions of the quantitative tables:
//!   an MLP with a configurable normalization layer, exact reverse-mode
//!   input gradients, and the four experiment drivers plus the sigmoid
//!   derivative-decay sweep.
//!
//! All arithmetic is 64-bit, all randomness flows from a single seed through
//! explicit stream ids, and every aggregation is order-pinned, so repeated
//! runs are bit-identical.

pub mod blindcheck;
mod error;
pub mod experiments;
pub mod normlayers;
pub mod numkit;
pub mod taylor;

pub use error::{CoreError, Result};
pub use numkit::{Matrix, RngStream, Tolerance, Vector};
pub use normlayers::{BatchStats, BnParams, PopulationStats, StandardizeMode, StandardizedBatch};
pub use taylor::{CaseTwoModel, LossDecomposition, LossFn, TaylorModel};
pub use blindcheck::{Assertion, GradReport, Mode, TermGrads};
pub use experiments::{ExperimentResult, MlpNet, NetCfg, NoiseSpec, NormKind, PolyLossFamily};
