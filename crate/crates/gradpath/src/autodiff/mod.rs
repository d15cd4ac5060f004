//! Toy-scale reverse-mode differentiation engine over computation graphs.
//!
//! Everything is f64 and single-threaded per graph instance; executions
//! are bit-reproducible for a fixed parameter set and input. The engine
//! exists to validate the static analyses empirically, not to train fast.

mod engine;
mod ops;
mod params;
mod value;

pub use engine::{arrival_trace, backward, forward, ExecError, ForwardPass, Gradients, LossMode};
pub use ops::{cross_entropy, mean_activation};
pub use params::{init_params, param_len, read_params, write_params, Params, SnapshotError};
pub use value::Value;
