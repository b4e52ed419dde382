//! Joint B0-field and image reconstruction for rotated-view EPI.
//!
//! The crate simulates echo-planar k-space from analytic phantoms under an
//! inhomogeneous off-resonance field, and reconstructs a distortion-free
//! image together with the field by fitting two coordinate networks through
//! the physics of the acquisition.

pub mod encode;
pub mod error;
pub mod fourier;
pub mod geometry;
pub mod inr;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod train;

pub use encode::{adjoint_view, forward_view, simulate_views, KSpaceSet, ViewData, ViewSpec};
pub use error::{Error, Result};
pub use inr::{init_network, query_b0, query_image, HashGridConfig, MlpConfig, NetworkParams};
pub use io::container::{Dataset, ReconResults};
pub use io::pipeline::{run_evaluate, run_phantom, run_reconstruct, run_simulate};
pub use io::runconfig::RunConfig;
pub use metrics::{evaluate, MetricReport};
pub use geometry::{make_grid, rotate_coords, rotate_point, RotationAngle, SpatialGrid};
pub use phantom::{
    eval_phantom, make_b0, make_coils, support_mask, AnalyticCoils, AnalyticField,
    AnalyticPhantom, CoilSet, ComplexImage, Ellipse, FieldMap, GaussianBump, Scene,
};
pub use train::{FieldSource, FitReport, NetsConfig, TrainConfig, Trainer};
