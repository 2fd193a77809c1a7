//! Reference-based texture matching and forward super-resolution.

pub mod bench;
pub mod error;
pub mod features;
pub mod gradient;
pub mod image;
pub mod loss;
pub mod matcher;
pub mod metrics;
pub mod nn;
pub mod patch;
pub mod pipeline;
pub mod resample;
pub mod synthesis;
pub mod tensor;
pub mod tnsr;
pub mod weights;

pub use error::{Error, Result};
pub use features::{Extractor, FeaturePyramid, Role};
pub use image::ImageU8;
pub use matcher::{CorrelationMatrix, MatchResult, SearchOutcome, TextureStack};
pub use patch::{PatchGeometry, PatchSet};
pub use pipeline::{run_pipeline, PipelineConfig};
pub use synthesis::{NetworkLayout, Networks};
pub use tensor::{IndexTensor, Tensor};
pub use weights::{LayerSpec, WeightManifest};
