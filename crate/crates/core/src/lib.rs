pub mod checkpoint;
pub mod checks;
pub mod commands;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod ops;
pub mod optim;
pub mod params;
pub mod spectral;
pub mod synthdata;
pub mod tensor;
pub mod train;
pub mod warpkit;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Real, Shape, Tensor};
