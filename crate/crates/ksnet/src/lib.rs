//! Key-based adversarial defense built from keyed block-wise pixel
//! shuffling and secret patch embeddings.
//!
//! The pipeline: images are encrypted by a keyed within-block pixel
//! permutation ([`transform`]); a ConvMixer-style isotropic classifier
//! ([`model`]) is pre-trained on plain images; N (embedding, head) pairs
//! are fine-tuned on encrypted images with the backbone frozen
//! ([`defense`]); inference samples a key from the pool per image; and a
//! gradient attack suite ([`attack`]) evaluates the defense under
//! transfer and adaptive threat models, orchestrated by [`experiment`].
//!
//! Start with the runnable examples:
//!
//! ```text
//! cargo run --release --example encrypt_roundtrip
//! cargo run --release --example gradient_check
//! cargo run --release --example train_defense
//! cargo run --release --example randomized_inference
//! cargo run --release --example attack_plain_model
//! cargo run --release --example transfer_attacks
//! cargo run --release --example eot_adaptive_attack
//! cargo run --release --example full_experiment
//! ```

pub mod attack;
pub mod data;
pub mod defense;
pub mod experiment;
pub mod kv;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod transform;

pub use attack::{AttackConfig, AttackError, Norm};
pub use data::{DataError, Dataset};
pub use defense::{DefendedClassifier, DefenseError, TrainConfig};
pub use model::{Model, ModelConfig, ModelError};
pub use tensor::{Scalar, Tensor, TensorError};
pub use transform::{BlockPermutation, Image, SecretKey, TransformError};

use thiserror::Error;

/// Crate-level error, mainly for binary exit-code mapping:
/// 2 = malformed files, 3 = bad configuration, 4 = runtime failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Experiment(#[from] experiment::ExperimentError),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(DataError::Format(_) | DataError::Label(_)) => 2,
            Error::Transform(TransformError::KeyFile(_) | TransformError::NotBijective { .. }) => 2,
            Error::Model(ModelError::Checkpoint(_)) => 2,
            Error::Config(_) => 3,
            Error::Model(ModelError::Config(_)) => 3,
            Error::Attack(AttackError::Config(_)) => 3,
            Error::Defense(DefenseError::Manifest(_) | DefenseError::BlockMismatch { .. }) => 3,
            Error::Experiment(experiment::ExperimentError::Config(_)) => 3,
            _ => 4,
        }
    }
}
