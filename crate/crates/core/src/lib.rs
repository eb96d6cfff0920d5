pub mod align;
pub mod autodiff;
pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rrg;
pub mod seed;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use tensor::Tensor;
