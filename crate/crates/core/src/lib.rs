//! Text-driven real-image editing by target-text inversion, progressive
//! embedding interpolation and balanced attention injection.

pub mod autodiff;
pub mod bam;
pub mod backbone;
pub mod diffusion;
pub mod error;
pub mod latent;
pub mod optim;
pub mod tensor;
pub mod ttis;

pub use error::{Error, Result};
