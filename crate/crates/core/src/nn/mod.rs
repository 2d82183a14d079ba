//! Minimal reverse-mode tensor engine: layers, Adam, and a finite-difference
//! gradient checker.

mod conv;
pub mod gradcheck;
pub mod graph;
pub mod params;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP};
pub use graph::{softmax_rows, BatchStats, Gradients, Graph, Mode, Padding, Var, BN_EPS, BN_MOMENTUM};
pub use params::{AdamConfig, ParamEntry, ParamStore};
