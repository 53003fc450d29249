//! Desk-scale stand-in for a vision-language policy: a synthetic grid
//! task, a small trainable sequence model over it, and a crop-reading
//! oracle.

pub mod oracle;
pub mod policy;
pub mod task;
pub mod vocab;

pub use oracle::CropOracle;
pub use policy::{ToyCheckpoint, ToyPolicy, ToyPolicyConfig};
pub use task::{ToyFixture, ToyTask, ToyTaskConfig, FEATURE_LEN, QUESTION};
pub use vocab::ToyVocab;
