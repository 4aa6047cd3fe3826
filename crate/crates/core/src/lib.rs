//! Cross-modal representation distillation: contrastive, similarity and
//! relational losses, hypersphere structure metrics, and a deterministic
//! unit-sphere toy experiment with a hand-differentiated MLP student.

pub mod cli;
pub mod embed_io;
pub mod error;
pub mod gradcheck;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod record;
pub mod toy;

pub use error::{Error, Result};
pub use labels::LabelVector;
pub use losses::{LossKind, LossResult};
pub use numerics::FeatureMatrix;
pub use record::RunRecord;
