//! Semantic, localization and combined scores for candidate descriptions.
//!
//! * Semantic: `α·cos(region, text)`, averaged over the cropped-region
//!   embedding and the local-attention full-image embedding. The text
//!   embedding uses the plain text with coordinates removed.
//! * Localization: ground truth is the de-duplicated union of detector boxes
//!   and region annotations, predictions the de-duplicated union of detector
//!   boxes and the description's own boxes. Each ground-truth box takes its
//!   best IoU over predictions, with IoUs below the filter zeroed, and the
//!   score is the mean over ground truth.
//! * Combined: `λ·S_sem + (1 − λ)·S_loc`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dedup_boxes, iou_matrix, BBox, DEFAULT_DEDUP_IOU};
use crate::grounded_text::{Diagnostic, GroundedDescription};
use crate::providers::{
    detect_full_frame, embed_crop, embed_local, embed_text, DetectRequest, Detection, EmbeddingVector, ImageLocator,
    Provider, DEFAULT_BOX_THRESHOLD,
};
use crate::region::RegionQuery;

pub const DEFAULT_ALPHA: f64 = 5.0;
pub const DEFAULT_LAMBDA: f64 = 0.8;
pub const DEFAULT_LOC_IOU_FILTER: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringParams {
    pub alpha: f64,
    pub lambda: f64,
    pub loc_iou_filter: f64,
    pub dedup_iou: f64,
    pub box_threshold: f64,
}

impl Default for ScoringParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            lambda: DEFAULT_LAMBDA,
            loc_iou_filter: DEFAULT_LOC_IOU_FILTER,
            dedup_iou: DEFAULT_DEDUP_IOU,
            box_threshold: DEFAULT_BOX_THRESHOLD,
        }
    }
}

impl ScoringParams {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidParam {
                name: "alpha",
                reason: format!("{} must be positive", self.alpha),
            });
        }
        crate::geometry::check_unit_threshold("loc_iou_filter", self.loc_iou_filter)?;
        crate::geometry::check_unit_threshold("dedup_iou", self.dedup_iou)?;
        if !(0.0..=1.0).contains(&self.box_threshold) {
            return Err(Error::InvalidParam {
                name: "box_threshold",
                reason: format!("{} is not in [0, 1]", self.box_threshold),
            });
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::InvalidParam {
            name: "lambda",
            reason: format!("{lambda} is not in [0, 1]"),
        })
    }
}

pub fn cosine(v: &EmbeddingVector, w: &EmbeddingVector) -> Result<f64> {
    if v.dim() != w.dim() {
        return Err(Error::DimensionMismatch {
            left: v.dim(),
            right: w.dim(),
        });
    }
    let (nv, nw) = (v.norm(), w.norm());
    if nv == 0.0 || nw == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = v.values.iter().zip(&w.values).map(|(a, b)| a * b).sum();
    Ok((dot / (nv * nw)).clamp(-1.0, 1.0))
}

/// `alpha · cos(v, w)`.
pub fn scaled_cosine(v: &EmbeddingVector, w: &EmbeddingVector, alpha: f64) -> Result<f64> {
    Ok(alpha * cosine(v, w)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticScore {
    /// Scaled similarity of the text to the cropped region.
    pub crop_similarity: f64,
    /// Scaled similarity of the text to the local-attention full-image embedding.
    pub local_similarity: f64,
    pub score: f64,
}

pub fn semantic_from_embeddings(
    crop: &EmbeddingVector,
    local: &EmbeddingVector,
    text: &EmbeddingVector,
    alpha: f64,
) -> Result<SemanticScore> {
    let crop_similarity = scaled_cosine(crop, text, alpha)?;
    let local_similarity = scaled_cosine(local, text, alpha)?;
    Ok(SemanticScore {
        crop_similarity,
        local_similarity,
        score: 0.5 * (crop_similarity + local_similarity),
    })
}

pub fn region_locator(region: &RegionQuery) -> ImageLocator {
    ImageLocator {
        uri: region.uri.clone(),
        width: region.image_width,
        height: region.image_height,
    }
}

pub fn semantic_score(
    provider: &dyn Provider,
    region: &RegionQuery,
    desc: &GroundedDescription,
    alpha: f64,
) -> Result<SemanticScore> {
    let image = region_locator(region);
    let crop = embed_crop(provider, &image, &region.region_box)?;
    let local = embed_local(provider, &image, &region.region_box)?;
    let text = embed_text(provider, &desc.plain_text)?;
    semantic_from_embeddings(&crop, &local, &text, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub score: f64,
    pub b_gt: Vec<BBox>,
    pub b_pred: Vec<BBox>,
    /// Per ground-truth box, the best filtered IoU.
    pub per_gt: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl Localization {
    pub fn n(&self) -> usize {
        self.b_gt.len()
    }
}

/// Mean over ground truth of the best IoU over predictions, IoUs below `iou_filter` zeroed.
pub fn filtered_mean_best_iou(b_gt: &[BBox], b_pred: &[BBox], iou_filter: f64) -> (f64, Vec<f64>) {
    if b_gt.is_empty() {
        return (0.0, Vec::new());
    }
    let per_gt: Vec<f64> = match iou_matrix(b_gt, b_pred) {
        Ok(m) => m
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&v| if v < iou_filter { 0.0 } else { v })
                    .fold(0.0, f64::max)
            })
            .collect(),
        Err(_) => vec![0.0; b_gt.len()],
    };
    let score = per_gt.iter().sum::<f64>() / b_gt.len() as f64;
    (score, per_gt)
}

/// Localization score from the three box sources, all in the full-image frame.
pub fn localization_from_boxes(
    b_ground: &[BBox],
    b_anno: &[BBox],
    b_text: &[BBox],
    iou_filter: f64,
    dedup_iou: f64,
) -> Localization {
    let gt_all: Vec<BBox> = b_ground.iter().chain(b_anno).copied().collect();
    let pred_all: Vec<BBox> = b_ground.iter().chain(b_text).copied().collect();
    let b_gt = dedup_boxes(&gt_all, dedup_iou);
    let b_pred = dedup_boxes(&pred_all, dedup_iou);
    let (score, per_gt) = filtered_mean_best_iou(&b_gt, &b_pred, iou_filter);
    let warning = b_gt
        .is_empty()
        .then(|| "no ground-truth boxes; localization score set to 0".to_string());
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Localization {
        score,
        b_gt,
        b_pred,
        per_gt,
        warning,
    }
}

/// Localization score of `desc` for `region`, given detections already in the full-image frame.
pub fn localization_score(
    region: &RegionQuery,
    desc: &GroundedDescription,
    detections: &[Detection],
    params: &ScoringParams,
) -> Localization {
    let b_ground: Vec<BBox> = detections.iter().map(|d| d.bbox).collect();
    localization_from_boxes(
        &b_ground,
        &region.member_boxes(),
        &desc.anchor_boxes(),
        params.loc_iou_filter,
        params.dedup_iou,
    )
}

/// `λ·S_sem + (1 − λ)·S_loc`.
pub fn combined_score(s_sem: f64, s_loc: f64, lambda: f64) -> f64 {
    lambda * s_sem + (1.0 - lambda) * s_loc
}

/// Identifies a candidate within its region: prompt template, then sample index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CandidateId {
    pub template_id: u8,
    pub sample: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate: CandidateId,
    pub template: String,
    pub raw_text: String,
    pub description: GroundedDescription,
    pub parse_diagnostics: Vec<Diagnostic>,
    pub semantic: SemanticScore,
    pub detections: Vec<Detection>,
    pub localization: Localization,
    pub lambda: f64,
    pub combined_score: f64,
}

impl ScoredCandidate {
    pub fn semantic_score(&self) -> f64 {
        self.semantic.score
    }

    pub fn localization_score(&self) -> f64 {
        self.localization.score
    }

    /// Same candidate with the combined score recomputed for another `lambda`.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            lambda,
            combined_score: combined_score(self.semantic.score, self.localization.score, lambda),
            ..self.clone()
        })
    }
}

/// Runs the detector on the region crop with the plain text as query.
///
/// An empty plain text yields no detections rather than an error.
pub fn detect_for(
    provider: &dyn Provider,
    region: &RegionQuery,
    desc: &GroundedDescription,
    box_threshold: f64,
) -> Result<Vec<Detection>> {
    if desc.plain_text.trim().is_empty() {
        return Ok(Vec::new());
    }
    detect_full_frame(
        provider,
        &DetectRequest {
            image: region_locator(region),
            crop: region.region_box,
            query: desc.plain_text.clone(),
            box_threshold,
        },
    )
}

/// Scores one parsed candidate end to end.
#[allow(clippy::too_many_arguments)]
pub fn score_candidate(
    provider: &dyn Provider,
    region: &RegionQuery,
    candidate: CandidateId,
    template: &str,
    raw_text: &str,
    description: GroundedDescription,
    parse_diagnostics: Vec<Diagnostic>,
    params: &ScoringParams,
) -> Result<ScoredCandidate> {
    let semantic = semantic_score(provider, region, &description, params.alpha)?;
    let detections = detect_for(provider, region, &description, params.box_threshold)?;
    let localization = localization_score(region, &description, &detections, params);
    let combined = combined_score(semantic.score, localization.score, params.lambda);
    Ok(ScoredCandidate {
        candidate,
        template: template.to_string(),
        raw_text: raw_text.to_string(),
        description,
        parse_diagnostics,
        semantic,
        detections,
        localization,
        lambda: params.lambda,
        combined_score: combined,
    })
}
