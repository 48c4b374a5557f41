//! Hierarchical semi-supervised contrastive learning for anomaly detection on
//! contaminated training data.
//!
//! The training objective combines three contrastive relations:
//!
//! * sample-to-sample: InfoNCE over augmented and rotation-shifted views,
//! * sample-to-prototype: pull normal (soft-weighted unlabeled) views toward
//!   learnable unit prototypes and push labeled anomalies away,
//! * normal-to-abnormal: InfoNCE with positives sampled by soft weight and
//!   labeled anomalies as negatives.
//!
//! At inference the normality score of a sample is its maximum cosine similarity
//! to the learned prototypes.

pub mod ablation;
pub mod augmentation;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod optim;
pub mod scenarios;
pub mod trainer;
pub mod types;

pub use error::{HsclError, Result};
pub use types::{
    cosine_similarity, AugmentedBatch, EmbeddingMatrix, HsclConfig, LabelStatus, LabeledSample, LossTerms,
    PrototypeBank, SampleId, TrainingView, WeightVector,
};
