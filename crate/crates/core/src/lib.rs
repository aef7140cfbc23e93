//! Discretized forward, co-state and gradient solvers for optimal control of
//! biloaded integro-differential systems with third-kind coupling.

pub mod adjoint;
pub(crate) mod assembly;
pub mod error;
pub mod forward;
pub(crate) mod jacobian;
pub mod kernels;
pub mod io;
pub(crate) mod linalg;
pub mod mesh;
pub mod optimize;
pub mod state;
pub mod verify;

pub use assembly::Snapshot;
pub use error::{Error, Result};
