//! gradpath: gradient-path and resource analysis for CNN architecture
//! graphs.
//!
//! The crate models convolutional architectures as explicit computation
//! DAGs ([`graph::CompGraph`]), builds the usual families (plain chains,
//! residual and masked-residual networks, dense and sparse aggregation,
//! one-shot aggregation, cross-stage partial variants, efficient layer
//! aggregation) from a declarative [`zoo::ArchSpec`], and answers two
//! kinds of questions about them:
//!
//! - **static**: where does gradient arrive, when, and through what
//!   ([`analysis`]); what does the network cost in FLOPs, parameters and
//!   memory traffic ([`cost`]);
//! - **empirical**: a small f64 reverse-mode engine ([`autodiff`]) executes
//!   the same graphs at toy scale so the static answers can be checked
//!   against real backward passes, and [`train`] runs deterministic
//!   toy-scale training for directional comparisons.

pub mod analysis;
pub mod autodiff;
pub mod cost;
pub mod graph;
pub mod train;
pub mod zoo;
