//! YOLOv8n building blocks and the three substitutions studied here:
//! kernel-warehouse convolution in the backbone, a focus-diffusion pyramid
//! neck and a shared group-normalized head. Also model assembly, parameter
//! audits, weight files, the training loss and an SGD step.

pub mod check;
pub mod config;
pub mod error;
pub mod fdpn;
pub mod gsd;
pub mod kw;
pub mod loss;
pub mod model;
pub mod nn;
pub mod params;
pub mod train;
pub mod weights;

pub use config::{ModelConfig, VARIANTS};
pub use error::{CoreError, Result, WeightsError};
pub use model::{LevelMaps, Model, ParamAudit};
pub use params::{Builder, Ctx, Mode, ParamId, ParamStore};
