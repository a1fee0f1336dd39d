//! Motor-imagery EEG decoding with a discriminative residual-dense
//! convolutional autoencoder trained jointly with a spatio-temporal graph
//! network over a learnable channel adjacency.

pub mod cli;
pub mod data;
pub mod drdcae;
pub mod error;
pub mod layer_check;
pub mod model;
pub mod params;
pub mod stgnn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
