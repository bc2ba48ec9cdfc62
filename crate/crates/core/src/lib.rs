//! Dataset engineering and evaluation for iterative single-class detector
//! development: YOLO label I/O, box geometry, detection metrics, ROI
//! cropping, deterministic splits, an iteration ledger and human review
//! queues for machine pre-labels.

pub mod api;
pub mod croppipe;
pub mod detections;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod labelio;
pub mod ledger;
pub mod review;

pub use detections::Detection;
pub use error::{Error, Result};
pub use geometry::PixelBox;
pub use labelio::{DatasetIndex, ImageDims, LabelState, LabeledImage, NormalizedBox};
