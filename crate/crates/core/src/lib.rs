//! Part-aware occlusion augmentation for image classifiers.
//!
//! Pipeline: load part annotations, select the parts to occlude, build
//! augmented images (black-out, CutMix, donor replacement or generative
//! inpainting), train on the real/augmented mixture with an auxiliary mask
//! loss, then score checkpoints under simulated patch occlusion.

pub mod annotation;
pub mod augment;
pub mod backend;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod image;
pub mod mask;
pub mod model;
pub mod nn;
pub mod occlusion;
pub mod seed;
pub mod toy;
pub mod train;

pub use annotation::{ImageId, ImageRecord, LabelTable, PartAnnotation, PartDataset, PartSet};
pub use augment::{AugmentationKind, AugmentedSample, LabelWeights};
pub use backend::{BackendSpec, CapabilityReport, DiffusionFeatureMap, GenerativeBackend, MockBackend};
pub use error::{Error, Result};
pub use eval::{AccuracyTable, EvalConfig};
pub use image::Image;
pub use mask::{BinaryMask, MaskRecord, Rle};
pub use model::OcclusionClassifier;
pub use occlusion::OcclusionPlan;
pub use train::{LossWeights, RunCheckpoint, TrainConfig, TrainingMixture};
