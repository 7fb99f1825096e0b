//! Spacetime E(n)-Transformer: an equivariant spatio-temporal graph model
//! for charged N-body dynamics, together with the simulator, baselines,
//! training harness and a property-verification suite.

pub mod baselines;
pub mod checkpoint;
pub mod dataset;
pub mod egcl;
pub mod error;
pub mod model;
pub mod nbody;
pub mod nn;
pub mod reference;
pub mod rng;
pub mod temporal;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{DataError, TensorError, TrainError};
pub use model::{GraphSequenceBatch, SetConfig, SetModel};
pub use tensor::{grad_check, Tape, Tensor, TensorId};
pub use train::{evaluate, train, Metrics, Model, TrainConfig};
