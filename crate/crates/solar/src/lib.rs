//! Two-stage self-supervised symmetric multimodal retrieval on frozen
//! teacher features: stage 1 learns masked cross-modal alignment, stage 2
//! learns a joint relevance score over mined contrastive groups.

pub mod error;
pub mod tensor;
pub mod tape;
pub mod numerics;
pub mod rng;
pub mod providers;
pub mod model;
pub mod losses;
pub mod maskgen;
pub mod segmentation;
pub mod sample_construction;
pub mod mining;
pub mod evaluation;
pub mod pipeline;

pub use error::{Result, SolarError};
