//! Image world models: augmentation-conditioned latent prediction with an
//! EMA teacher, and the evaluation ladder around it.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod pretrain;
pub mod probes;
pub mod rng;
pub mod vit;

pub use error::{Error, Result};
pub use image::ImageTensor;
