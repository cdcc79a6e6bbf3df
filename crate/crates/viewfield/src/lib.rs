//! View-centric neural-field mapping: multiple local radiance fields
//! anchored to tracker keyframes, trained online from a keyframe /
//! covisibility / loop-closure event stream, with novel views synthesized
//! by blending the nearest local models in image space.

pub mod atlas;
pub mod blend;
pub mod config;
pub mod error;
pub mod geom;
pub mod grid;
pub mod img;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod pipeline;
pub mod render;
pub mod tracksim;
pub mod train;

pub use config::{AtlasConfig, FieldConfig, LossWeights, RenderConfig, RunConfig, RunMode};
pub use error::{Error, Result};
