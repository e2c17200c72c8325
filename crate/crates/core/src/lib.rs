pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod gaussian_regress;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod ply;
pub mod pointmap_net;
pub mod side_enhance;
pub mod splat;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use checkpoint::Checkpoint;
pub use eval::{evaluate, EvalReport, EvalViews};
pub use gaussian::{ActivationConfig, GaussianSet};
pub use gaussian_regress::{GaussianNet, UNetConfig};
pub use geometry::{CameraModel, CanonicalView, PointMap};
pub use image::{Mask, Rgb, RgbImage};
pub use pipeline::{PipelineOptions, Reconstruction, Reconstructor};
pub use pointmap_net::{NetConfig, PointMapNet};
pub use synth::{Dataset, DatasetConfig};
pub use training::{Stage1Config, Stage2Config};
