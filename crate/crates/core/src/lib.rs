pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod i3ds;
pub mod imaging;
pub mod latent_codec;
pub mod lora;
pub mod metrics;
pub mod nn;
pub mod radiance_field;
pub mod scene_data;
pub mod tensor;
pub mod vsd;

pub use error::{Error, Result};
