//! Finite-volume simulation of the doubly degenerate chemotaxis-consumption
//! system
//!
//! ```text
//! u_t = div(u^{m-1} v grad u) - div(f(u) v grad v) + l u v
//! v_t = lap v - u v
//! ```
//!
//! on a rectangle with no-flux boundaries, together with runtime checks of
//! the a-priori estimates the system is known to satisfy and a nutrient-clock
//! rescaling that recovers the large-time limit of `u`.

pub mod config;
pub mod error;
pub mod grid;
pub mod io;
pub mod model;
pub mod monitors;
pub mod rescale;
pub mod solver;

mod linalg;
mod power;

pub use error::{Error, Result};
pub use grid::{FaceField, Grid, ScalarField};
pub use model::{Case, FKind, InitialData, ModelParams};
pub use solver::{SimState, StepControl, StopReason, StopRule, Trajectory};
