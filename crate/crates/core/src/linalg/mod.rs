//! Dense and sparse kernels plus the factorizations used by the
//! coefficient estimators.

mod decomp;
mod dense;
mod sparse;

pub use decomp::{
    orthonormalize, pinv, pinv_solve, range_finder, range_finder_with, svd, RangeFinderOptions, Svd,
    DEFAULT_RCOND,
};
pub use dense::DenseMatrix;
pub use sparse::{spmm, spmm_t, Csr};
