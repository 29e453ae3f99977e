//! Desk-scale spatiotemporal masked-autoencoder pretraining.
//!
//! The crate covers the full pipeline: clip handling and augmentation,
//! tubelet tokenization, mask sampling, the asymmetric encoder/decoder
//! with pixel reconstruction, AdamW training loops, and an analytic
//! multiply-accumulate cost model for the sparse-encoding speedup.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod model;
pub mod perf;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod video;
pub mod viz;

pub use error::{MaeError, Result};
pub use masking::{MaskPlan, MaskSampler, MaskSchedule, ScheduleShape, TokenGrid};
pub use model::{ClassifierHead, MaeConfig, MaeModel};
pub use tensor::{Scalar, Tape, TapeId, Tensor};
pub use tokenizer::{PatchSpec, PositionalEmbedding, TokenSequence};
pub use video::{Dataset, SampleBatch, SamplePipeline, VideoClip};
