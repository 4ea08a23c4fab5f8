//! Non-learned pipeline of a proposal-free LiDAR panoptic segmentation
//! system on a polar bird's-eye-view grid.
//!
//! * [`grid`]: polar quantization and the cell-indexing contract
//! * [`voxel`]: point grouping, max-pooled BEV features, voxel label votes,
//!   visibility
//! * [`targets`]: center heatmaps and offset fields
//! * [`fusion`]: NMS centers, foreground grouping, class votes, per-point
//!   panoptic labels
//! * [`augment`]: instance bank, projection-preserving instance
//!   augmentation, scene augmentation
//! * [`metrics`]: PQ / SQ / RQ / PQ† and mIoU
//! * [`io`], [`config`], [`synth`], [`render`]: file formats, configuration,
//!   synthetic oracle scenes and BEV images

pub mod augment;
pub mod cloud;
pub mod config;
pub mod error;
pub mod fusion;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod render;
pub mod synth;
pub mod targets;
pub mod tensor;
pub mod voxel;

pub use cloud::{ClassId, InstanceId, Point, PointCloud};
pub use config::Config;
pub use error::{Error, Result};
pub use fusion::{FusionParams, PanopticLabeling, Semantic};
pub use grid::{CellIndex, PixelIndex, PolarGridConfig};
pub use tensor::BevTensor;
