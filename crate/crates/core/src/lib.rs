//! Decentralized kernel principal component analysis over simulated networks.
//!
//! A set of nodes, each holding a private slice of a dataset, cooperates to
//! estimate the leading kernel principal component of the union of their data
//! without ever pooling raw samples. Each node runs a consensus-ADMM state
//! machine whose variables live entirely in kernel coordinates; nodes exchange
//! only coefficient vectors and projected consensus iterates with their
//! neighbors. The crate provides:
//!
//! * [`kernel`] — Gram-block evaluation for normalized kernels, double
//!   centering, and ridge-stabilized Cholesky solves.
//! * [`central`] — the centralized reference solver (top eigenpair of the full
//!   centered Gram matrix) every decentralized run is judged against.
//! * [`topology`] — neighborhood construction (ring, complete, custom edge
//!   lists), penalty-weight schedules, and the penalty floor that guarantees
//!   monotone descent of the augmented Lagrangian.
//! * [`node`] — the per-node ADMM state machine: consensus (`z`), coefficient
//!   (`alpha`), and multiplier (`eta`) updates in kernel coordinates.
//! * [`engine`] — a deterministic synchronous message-passing simulator with a
//!   per-node traffic ledger.
//! * [`metrics`] — similarity of decentralized estimates to the centralized
//!   solution, plus local and neighborhood-pooling baselines.
//! * [`explicit`] — an explicit feature-space reference implementation used to
//!   cross-validate the kernel-coordinate updates and to audit the descent
//!   inequality of the augmented Lagrangian.
//! * [`dataset`] — IDX (MNIST-style) loading, synthetic data, partitioning,
//!   and the median-distance bandwidth heuristic.
//! * [`experiment`] — config-driven end-to-end runs producing CSV artifacts.

pub mod central;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod explicit;
pub mod kernel;
pub mod metrics;
pub mod node;
pub mod topology;

pub use error::{Error, Result};
