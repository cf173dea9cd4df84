pub mod ablation;
pub mod annotation;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod superpixels;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use superpixels::SuperpixelMap;
pub use types::{Centroids, Image, LabelMask, NormalizedRgb, PixelFeatures, SegmentationOutput};
