//! Image outpainting: an encoder, recurrent content transfer and a decoder
//! with skip horizontal connections, trained against global and local
//! WGAN-GP critics.

pub mod checkpoint;
pub mod critic;
pub mod data;
pub mod error;
pub mod generator;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod train;

pub use error::{Error, Result};
pub use generator::{Generator, GeneratorConfig};
pub use params::{ParamStore, Param};
pub use train::{Models, StepMetrics, TrainState, Trainer};
