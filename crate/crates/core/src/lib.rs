//! Number-plate detection kit: a self-contained trainable CNN engine, an
//! anchor-based detector, a plate classifier, and the matching evaluation
//! suite, exercised on deterministic synthetic plate scenes.

pub mod anchors;
pub mod arch;
pub mod data;
pub mod detection;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use tensor::Tensor;
