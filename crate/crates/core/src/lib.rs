//! Feed-forward networks whose neurons grow dendrite nodes trained by
//! cascade correlation, with perforated backpropagation.

pub mod activation;
pub mod config;
pub mod conv;
pub mod data;
pub mod dendrites;
pub mod error;
pub mod grad;
pub mod network;
pub mod optim;
pub mod orchestrator;
pub mod store;
pub mod seeds;
pub mod synth;
pub mod tensor;

pub use activation::Activation;
pub use data::{Dataset, Labels, SplitSpec};
pub use dendrites::{CandidateConfig, CandidatePool, CandidateState, DendriteBank, DendriteNode};
pub use error::{Error, Result};
pub use grad::{BackpropMode, GradBuffer, LossKind};
pub use network::{LayerKind, LayerSpec, Mode, Network, NetworkSpec, ParamCount};
pub use tensor::Tensor;
