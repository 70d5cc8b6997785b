//! Deterministic laboratory for on-chain exploit classifiers.
//!
//! The crate models the full lifecycle of a fixed-point classifier that
//! lives on two ledgers: it is trained one sample at a time on an L2
//! governance chain under Proof-of-Improvement (an update is kept only if
//! it improves at least one test metric and degrades none), committed by
//! Keccak-256 hash, and transferred to an L1 inference chain that accepts
//! parameters only when the hash matches.
//!
//! - [`fixedpoint`]: truncating integer arithmetic at a decimal scale.
//! - [`inference`]: quantized forward passes, float reference, micro-steps,
//!   the sign-consistency certificate.
//! - [`gascost`]: closed-form gas bounds per architecture.
//! - [`poim`]: the governance state machine.
//! - [`bridge`]: canonical serialization, commitments, L1 verification.
//! - [`chainsim`]: two simulated ledgers with atomic, metered transactions.
//! - [`dataset`]: transaction feature records, temporal splits, generator.
//! - [`analysis`]: PCA, k-means and cluster-quality indices.
//! - [`scenario`]: replayable scripted runs over both ledgers.

pub mod analysis;
pub mod bridge;
pub mod chainsim;
pub mod dataset;
pub mod fixedpoint;
pub mod gascost;
pub mod inference;
pub mod keccak;
pub mod poim;
pub mod scenario;
