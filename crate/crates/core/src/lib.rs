//! Homogenised diffusion tensors for random quasi-periodic 2D media.
//!
//! The crate provides two solvers for the apparent corrector problems on a
//! truncated periodic supercell — a monolithic conforming FEM and a low-rank
//! tensor method coupling cells through a symmetric weighted interior penalty
//! (SWIP) discontinuous Galerkin form — together with medium samplers,
//! empirical interpolation of conductivities, and variance-reduced Monte
//! Carlo estimators (two-level control variates and multi-fidelity MC).

pub mod conductivity;
pub mod eim;
pub mod error;
pub mod estimators;
pub mod fem;
pub mod homogenize;
pub mod media;
pub mod mslrm;
pub mod sparse;
pub mod supercell;
pub mod tensor;
pub mod types;
pub mod weakly;

pub use conductivity::{ConductivityField, DenseConductivity, LowRankConductivity};
pub use error::{Error, Result};
pub use fem::{CellMesh, MicroField};
pub use supercell::MesoGrid;
pub use tensor::TensorField;
pub use types::{HomogenizedTensor, SymMat2};
