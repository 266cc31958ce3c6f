//! Fingerprint localization with adaptive graph neural networks and
//! meta-learning: CSI preprocessing, an indoor multipath simulator, the AGNN
//! model, MAML-style meta-training and reference baselines.

pub mod agnn;
pub mod baselines;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod meta;
pub mod model;
pub mod signal;
pub mod simulate;
pub mod stats;

pub use dataset::{FingerprintDataset, Origin};
pub use error::{Error, Result};
