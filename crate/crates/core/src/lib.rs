//! Desk-scale engine for open-set test-time adaptation: pretrain a small
//! batch-normalized classifier on synthetic source clusters, stream
//! corrupted batches mixing known-class (csID) and unknown-class (csOOD)
//! samples, adapt online with the UniEnt / UniEnt+ objectives, and score
//! open-set classification and detection against Source / BN-Adapt / TENT
//! baselines.

pub mod adapt;
pub mod autodiff;
pub mod bench;
pub mod error;
pub mod filter;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
