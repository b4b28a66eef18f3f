//! Event-camera optical flow by contrast maximization.
//!
//! Events are split into fixed-count partitions, warped with a translation
//! plus isotropic-scaling motion model, and scored by the sharpness of the
//! resulting average-timestamp images. The crate also carries a synthetic
//! underwater event simulator with analytic ground truth, a model-free
//! solver, evaluation metrics and flow visualization.

pub mod error;
pub mod events;
pub mod flow;
pub mod grid;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod optimize;
pub mod synth;
pub mod viz;
pub mod warp;

pub use error::{Error, Result};
pub use events::{count_encode, partition_by_count, Event, EventCountImage, EventPartition, EventStream, Polarity, SensorSize};
pub use grid::Grid;
pub use loss::{LossBreakdown, LossConfig};
pub use warp::{build_iwe, compute_centroid, warp_event, Centroid, Iwe, MotionField, Reference, Theta};
