pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod multiscale;
pub mod network;
pub mod par;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use arch::{Arch, NetworkSpec, Role};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{CheckpointError, Error, Result};
pub use network::{build_network, Network};
pub use rng::{Distribution, RngState};
pub use scalar::Scalar;
pub use tensor::Tensor;
