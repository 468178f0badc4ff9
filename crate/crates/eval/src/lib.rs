//! Detection post-processing and evaluation: decoding head maps, NMS,
//! matching, precision/recall/AP, datasets in YOLO text format, the
//! augmentation pipeline, toy fixtures and a latency benchmark.

pub mod augment;
pub mod bench;
pub mod boxes;
pub mod dataset;
pub mod decode;
pub mod error;
pub mod eval;
pub mod image;
pub mod labels;
pub mod metrics;
pub mod nms;
pub mod oracle;
pub mod synth;
pub mod toy;

pub use boxes::{iou, BBox, Detection, GroundTruth};
pub use dataset::Sample;
pub use error::{EvalError, Result};
pub use eval::{EvalConfig, MetricsReport};
pub use image::Image;
