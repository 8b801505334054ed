//! Detection and mitigation of behavioral hallucinations in image-sequence
//! captions, working on exported patch and token embeddings.

pub mod cooccurrence;
pub mod detection;
pub mod error;
pub mod io;
pub mod metrics;
pub mod mitigation;
pub mod model;
pub mod seeding;
pub mod snowball;

pub use detection::{BehaviorDetection, DetectionConfig, PatchLocation, Verdict};
pub use error::{Result, SheError};
pub use metrics::MetricSummary;
pub use mitigation::{AlphaMode, CorrectionRecord, DirectionMode, MitigationConfig};
pub use model::{
    cosine, Annotation, BehaviorAnnotation, CaptionRecord, CaptionTokens, FeatureIndex, Frame, Label,
    LayerPatchEmbeddings, LayerTokenEmbeddings, ObjectAnnotation, SequenceBundle, Span, Vec32,
};
pub use snowball::{Perturbation, PerturbSpec, StubModel};
