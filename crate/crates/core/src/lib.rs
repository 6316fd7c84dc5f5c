//! A laboratory for generative flow networks on exhaustively enumerable DAGs.
//!
//! The crate trains small MLP forward/backward policies on the 2-D hypergrid
//! environment under three objectives (trajectory balance, detailed balance,
//! and the forward-looking detailed-balance parametrization), measures
//! generalization by hiding states from the reward signal while tracking the
//! exact Jensen-Shannon divergence to the target distribution, and numerically
//! certifies stability and bound inequalities by exact enumeration.
//!
//! Modules:
//! - [`graph`]: pointed-DAG representation and trajectory enumeration oracles
//! - [`hypergrid`]: the 2-D grid environment, 9-mode reward, hiding masks
//! - [`autodiff`]: scalar reverse-mode tape used by all losses
//! - [`policy`]: MLP policies with forward/backward/flow heads, checkpoints
//! - [`objectives`]: TB / DB / FL-DB losses over sampled trajectories
//! - [`trainer`]: on-policy SGD/Adam loop with multi-seed orchestration
//! - [`eval`]: exact terminal distributions and divergence metrics
//! - [`theory`]: numerical certification of the stability and TV/KL bounds
//! - [`report`]: CSV matrices, PGM heatmaps, bound-report tables
//!
//! Multi-seed runs and perturbation batches execute in parallel through rayon
//! when the `parallel` feature (default) is enabled; disabling it swaps in a
//! sequential fallback with identical results.

pub mod autodiff;
pub mod eval;
pub mod graph;
pub mod hypergrid;
pub mod objectives;
pub mod parallel;
pub mod policy;
pub mod report;
pub mod theory;
pub mod trainer;
