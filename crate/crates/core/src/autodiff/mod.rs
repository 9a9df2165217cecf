//! Minimal reverse-mode differentiation engine: exactly the operators the
//! detection network needs, each with a finite-difference-verified backward.

mod bgru;
mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use bgru::{BgruWeights, GruDirection};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use gradcheck::{gradcheck, GradCheckReport};
pub use graph::{BatchNormState, Graph, NodeId, OpError, BATCHNORM_EPS, BATCHNORM_MOMENTUM};
pub use params::{ParamId, ParamSet, Parameter};
pub use tensor::{gemm_acc, Scalar, Tensor};
