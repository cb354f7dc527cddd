//! Spatial interpolation: learnable IDW densification of stations, bilinear
//! resampling, and the fixed-exponent IDW baseline.

mod grid;
mod idw;
mod resample;

pub use grid::GridSpec;
pub use idw::{idw_predict_points, softplus, softplus_inverse, IdwParams, SparseInputs};
pub use resample::Window;

/// Exponent of the evaluation baseline.
pub const BASELINE_EXPONENT: f64 = 2.0;
