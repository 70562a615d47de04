//! Grounded region-description preference data.
//!
//! Region queries are sampled from detection annotations, candidate grounded
//! descriptions are collected from a generation provider and scored for
//! semantic fit and localization, the best one has its boxes refined, and
//! best/worst pairs are emitted for DPO training. [`eval`] scores model output
//! on referring-expression and phrase-grounding benchmarks.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grounded_text;
pub mod hashing;
pub mod pipeline;
pub mod preference;
pub mod providers;
pub mod refinement;
pub mod region;
pub mod scoring;
pub mod synthetic;

pub use dataset::{ImageId, ImageRecord, ObjectAnnotation, ObjectId};
pub use error::{Error, Result};
pub use eval::{eval_grounding_merge, eval_rec, GroundingSample, RecSample, ThresholdTable};
pub use geometry::{dedup_boxes, iou, iou_matrix, merge_boxes, BBox};
pub use grounded_text::{parse_grounded, serialize_grounded, Convention, GroundAnchor, GroundedDescription};
pub use pipeline::{Pipeline, PipelineConfig, RunReport, Stage, TemplateStyle};
pub use preference::{build_pair, dpo_loss, dpo_loss_grad, DpoLogProbs, PairOutcome, PreferencePair};
pub use providers::{Detection, Provider};
pub use refinement::refine;
pub use region::RegionQuery;
pub use scoring::{combined_score, localization_score, semantic_score, ScoredCandidate, ScoringParams};
