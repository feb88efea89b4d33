//! Quasi-optimal interior penalty finite element methods on triangle meshes.
//!
//! Discontinuous Galerkin, penalized Crouzeix-Raviart and C0 interior penalty
//! discretizations whose right-hand sides are evaluated on smoothed test
//! functions, so that loads outside `L^2` are handled and the discrete
//! solutions are quasi-optimal in the extended energy norms.

pub mod basis;
pub mod error;
pub mod experiments;
pub mod forms;
pub mod mesh;
pub mod smoothers;
pub mod solver;
pub mod spaces;

pub use error::{Error, Result};
pub use experiments::{
    convergence_study, energy_error, best_approximation, qopt_ratio, run_method, ConvergenceRecord,
    ManufacturedSolution, MethodConfig, Norm, Problem, Variant,
};
pub use forms::{DgVariant, LameCoefficients, LoadFunctional, PenaltyConfig, SmootherChoice};
pub use mesh::{Face, Mesh, Point};
pub use smoothers::{Smoother, SmootherOutput};
pub use solver::{SolveReport, SparseMatrix};
pub use spaces::{FeFunction, FeSpace, Jet, SamplePoint, SpaceKind};
