pub mod align;
pub mod error;
pub mod imagecore;
pub mod lightrig;
pub mod oracle;
pub mod quality;
pub mod reflectfield;
pub mod relight;

pub use error::{Error, Result};
pub use imagecore::{HdrImage, LdrImage, ToneMapParams};
pub use lightrig::{CameraModel, EnvMap, LightRig, OlatStack, WeightVector};
