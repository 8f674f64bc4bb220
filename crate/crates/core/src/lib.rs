pub mod diffusion;
pub mod error;
pub mod features;
pub mod ingest;
pub mod metrics;
pub mod nn;
pub mod od;
pub mod physical;
pub mod rng;
pub mod synth;
pub mod tilegrid;

pub use error::{Error, Result};
pub use od::{ODMatrix, PairSelection};
