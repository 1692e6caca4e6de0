//! Reverse-mode differentiation: tape, parameters, kernels and the
//! finite-difference oracle.

pub mod gradcheck;
pub mod kernels;
pub mod param;
pub mod tape;

pub use gradcheck::{finite_difference_check, FdEntry, FdOptions, FdReport, Stencil};
pub use param::{BnStats, ParamId, ParamStore, Parameter, StatsId};
pub use tape::{sigmoid, Gradients, NormOutput, NormStats, Tape, Var};
