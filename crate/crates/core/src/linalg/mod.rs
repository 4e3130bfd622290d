//! Dense matrix kernels, Stiefel projection and seeded randomness.

mod decomp;
mod mat;
mod rng;

pub use decomp::{
    cholesky, inverse, lu_logabsdet, orth_defect, polar_iterations, polar_project, LogAbsDet, Lu,
    Orientation, POLAR_MAX_ITER, POLAR_TOL,
};
pub use mat::{gemm, Mat};
pub use rng::Rng;
