//! Hierarchical differentiable architecture search at desk scale.
//!
//! The crate covers the full pipeline: a reverse-mode autodiff tensor engine,
//! the candidate-operator catalog with five search spaces, a softmax-relaxed
//! supernet, operator clustering from captured feature maps, gradient-
//! confusion profiling with depth matching, and the two-stage search that
//! derives a discrete genotype.

pub mod data;
pub mod error;
pub mod graph;
pub mod gradcheck;
pub mod ht1;
pub mod kernels;
pub mod numeric;
pub mod ops;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{BnHandle, BnStats, Graph, Mode, Var};
pub use kernels::{Conv2dCfg, PoolKind};
pub use ops::{space, OperatorInstance, OperatorKind, SearchSpace, SpaceId};
pub use tensor::{Param, Tensor};
