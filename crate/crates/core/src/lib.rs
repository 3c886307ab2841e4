//! Recovery of minute-resolution residential load matrices from interval
//! smart-meter averages and a fast aggregate feeder measurement.
//!
//! The load matrix `P` is modelled in the differenced domain as
//! `P W = K + D`, a low-rank part `K` (shared patterns such as base load and
//! PV output) plus a sparse part `D` (appliance on/off jumps).

pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod model;
pub mod prox;
pub mod solver;
pub mod synth;
pub mod transforms;

pub use error::{Error, Result};
pub use model::{
    compose_estimate, simulate_measurements, Decomposition, LoadMatrix, MeasurementSet, NoiseSpec,
    TimeAxis,
};
pub use solver::{
    default_lambda, extract_support, run_algorithm1, solve_recovery, solve_refinement,
    SolveReport, SolverConfig, SupportSet,
};
pub use transforms::Matrix;
