//! Compiler and simulator for mapping small CNN/RNN networks onto a tiled
//! AIE-ML style accelerator array.

pub mod arch;
pub mod characterize;
pub mod cronet;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod numerics;
pub mod ops;
pub mod place;
pub mod sim;
pub mod tensor;

pub use arch::{ArchSpec, Coord};
pub use error::{Error, Result};
pub use graph::Graph;
pub use numerics::ElemType;
pub use tensor::{Region, Tensor};
