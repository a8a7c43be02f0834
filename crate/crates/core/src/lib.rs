//! Multi-scale spatial-temporal self-attention graph network for
//! skeleton-based action recognition.

pub mod attention;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod gradsuite;
pub mod graph;
pub mod modality;
pub mod multiscale;
pub mod network;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::GraphSpec;
pub use tensor::{Axis, Tape, Tensor, Var};
