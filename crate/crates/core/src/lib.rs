//! Funnel synthesis for nonlinear control systems: multi-start NLP falsifiers
//! around TVLQR designs, plus an exact ellipsoid oracle for linear systems.

pub mod dynamics;
pub mod error;
pub mod funnel;
pub mod linoracle;
pub mod nlpsolve;
pub mod numkernel;
pub mod odeint;
pub mod tracking;
pub mod trajgen;

pub use error::{Error, Result};
pub use numkernel::{Matrix, Vector};
