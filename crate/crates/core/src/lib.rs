//! Augmented feature alignment for unsupervised cross-domain object
//! detection: intermediate-domain image mixing with soft domain labels,
//! adversarial pyramid and instance alignment through gradient reversal,
//! and the joint training procedure, all at desk scale on synthetic
//! two-domain data.

pub mod align;
pub mod autograd;
pub mod boxes;
pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod evalviz;
pub mod gradcheck;
pub mod idig;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainloop;

pub use error::{Error, Result};
