//! An updatable, in-memory learned index for variable-length string keys.
//!
//! Every leaf model is a least-squares fit of key position against the key's
//! byte values. Retraining reuses the memoized `R` factor of the previous
//! QR decomposition, so the cost of a retrain is proportional to the number
//! of newly inserted keys rather than to the size of the leaf.

mod clock;
pub mod error;
pub mod index;
pub mod iqrd;
pub mod keycodec;
pub mod linalg;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
pub use index::{Index, IndexConfig, IndexStats, LeafStats, ScanEntry};
pub use iqrd::MemoizedFactor;
pub use keycodec::EncodedKey;
pub use linalg::{DenseMatrix, RFactor, Vector};
pub use model::LinearModel;
pub use trainer::{EngineBackend, RetrainReason, RetrainRequest, SubmitOutcome, Trainer, TrainerConfig, TrainerStats};

/// Values stored in the index.
pub type Value = u64;
