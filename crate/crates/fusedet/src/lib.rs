//! Desk-scale multi-modal 3D object detection testbed.
//!
//! The crate is organised as a pipeline:
//!
//! * [`autodiff`] — dense-tensor reverse-mode automatic differentiation plus
//!   the neural primitives (MLP, attention, conv, optimizer) every learned
//!   module is built from.
//! * [`geom`] — coordinate math: spherical conversion, pinhole projection,
//!   normalized-space mapping, box geometry.
//! * [`sim`] — synthetic scene generation (ray-cast LiDAR, radar points,
//!   flat-shaded cameras), beam reduction, dataset files.
//! * [`encoders`] — per-modality feature extraction onto BEV / image grids.
//! * [`fusion`] — query-based feature sampling and fusion across modalities.
//! * [`decoder`] — iterative-refinement transformer decoder and prediction.
//! * [`loss`] — Hungarian matching and the set-to-set training loss.
//! * [`eval`] — center-distance mAP, TP error metrics, NDS, breakdowns.
//! * [`pipeline`] — config, training loop, experiment matrix, and the CLI.

pub mod autodiff;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geom;
pub mod loss;
pub mod pipeline;
pub mod sim;

pub use error::{Error, Result};
