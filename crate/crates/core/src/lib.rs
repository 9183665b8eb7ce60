pub mod aggregation;
pub mod autoencoder;
pub mod autograd;
pub mod checkpoint;
pub mod color;
pub mod config;
pub mod degrade;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod image;
pub mod latent;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod prior;
pub mod tensor;
pub mod textures;
pub mod train;

pub use error::{Error, Result};
pub use latent::LatentGrid;
pub use tensor::Tensor;
