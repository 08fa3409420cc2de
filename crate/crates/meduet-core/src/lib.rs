//! Disentangled unified pretraining for volumetric images, desk scale.
//!
//! The pipeline: a synthetic phantom corpus with controlled content/style
//! factors, a frozen tokenizer into a compact latent grid, a transformer
//! backbone pretrained with token demixing + dual reconstruction, adversarial
//! domain heads on split content/style factors, teacher distillation, and a
//! style-swap quadruplet contrast. Downstream: factor-conditioned latent
//! diffusion with dual guidance, latent-space style augmentation for
//! segmentation finetuning, and probing/consistency/MMD evaluation.
//!
//! All training math runs in f64 on [`meduet_tensor::Tape`]; everything is
//! seeded and single-threaded, so identical configs reproduce identical
//! artifacts bit for bit.

pub mod arrayio;
pub mod codes;
pub mod config;
pub mod corpus;
pub mod diffusion;
pub mod evals;
pub mod finetune;
pub mod losses;
pub mod mixing;
pub mod model;
pub mod optim;
pub mod params;
pub mod tokenizer;
pub mod trainer;

/// Crate-wide error type. The CLI maps variants onto process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or arguments.
    #[error("config: {0}")]
    Config(String),
    /// A required input artifact is absent or unreadable.
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    /// NaN/Inf loss, failed convergence, or other numerical breakdown.
    #[error("numerical: {0}")]
    Numerical(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
