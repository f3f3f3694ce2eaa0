//! Multi-species interacting-particle population model with kernel
//! cross-diffusion, its nonlocal PDE limit, stochastic flows with
//! Feynman–Kac representations, and bounded-Lipschitz distances.

// index loops mirror the component formulas; negated comparisons reject NaN
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flow;
pub mod grid;
pub mod ibm;
pub mod init;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pde;
pub mod rng;

pub use error::{Error, Result};
pub use grid::{Grid, GridField};
pub use kernels::{EmpiricalMeasure, KernelSpec};
pub use model::CoefficientModel;
