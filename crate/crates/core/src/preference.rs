//! Preference pairs and the DPO objective they feed.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::ImageId;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::grounded_text::{serialize_grounded, Convention};
use crate::refinement::{refine, RefineParams};
use crate::region::RegionQuery;
use crate::scoring::{CandidateId, ScoredCandidate};

pub const PAIR_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_DELTA_MIN: f64 = 0.05;
pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairParams {
    pub delta_min: f64,
    pub beta: f64,
    pub refine: RefineParams,
}

impl Default for PairParams {
    fn default() -> Self {
        Self {
            delta_min: DEFAULT_DELTA_MIN,
            beta: DEFAULT_BETA,
            refine: RefineParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub schema_version: u32,
    pub image_id: ImageId,
    pub region_index: u32,
    pub image_uri: String,
    pub region_box: BBox,
    pub canonical_prompt: String,
    /// Refined best-scored description.
    pub chosen: String,
    /// Lowest-scored description as generated.
    pub rejected: String,
    pub chosen_score: f64,
    pub rejected_score: f64,
    pub margin: f64,
    pub chosen_candidate: CandidateId,
    pub rejected_candidate: CandidateId,
}

impl PreferencePair {
    /// Chat-style record with `prompt` / `chosen` / `rejected` message lists
    /// and the image reference, as consumed by common DPO trainers.
    pub fn to_conversation(&self) -> serde_json::Value {
        json!({
            "images": [self.image_uri],
            "prompt": [{"role": "user", "content": format!("<image>\n{}", self.canonical_prompt)}],
            "chosen": [{"role": "assistant", "content": self.chosen}],
            "rejected": [{"role": "assistant", "content": self.rejected}],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// Best and worst candidates are too close.
    Margin,
    /// Best and worst are the same candidate.
    Degenerate,
    /// Refinement had no ground truth to work with.
    RefineFailed,
    TooFewCandidates,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::Margin => "margin",
            SkipReason::Degenerate => "degenerate",
            SkipReason::RefineFailed => "refine_failed",
            SkipReason::TooFewCandidates => "too_few_candidates",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairOutcome {
    Pair(PreferencePair),
    Skip { reason: SkipReason, detail: String },
}

/// Index of the best and worst candidates; ties go to the lower candidate id.
pub fn select_extremes(candidates: &[ScoredCandidate]) -> Option<(usize, usize)> {
    if candidates.is_empty() {
        return None;
    }
    let mut best = 0;
    let mut worst = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let (b, w) = (&candidates[best], &candidates[worst]);
        if c.combined_score > b.combined_score || (c.combined_score == b.combined_score && c.candidate < b.candidate) {
            best = i;
        }
        if c.combined_score < w.combined_score || (c.combined_score == w.combined_score && c.candidate < w.candidate) {
            worst = i;
        }
    }
    Some((best, worst))
}

/// Pairs the refined best candidate against the unchanged worst one.
///
/// Refinement uses the ground truth and detections recorded while scoring the
/// best candidate.
pub fn build_pair(
    candidates: &[ScoredCandidate],
    region: &RegionQuery,
    canonical_prompt: &str,
    convention: Convention,
    params: &PairParams,
) -> Result<PairOutcome> {
    if candidates.len() < 2 {
        return Err(Error::InvalidParam {
            name: "candidates",
            reason: format!("need at least 2, got {}", candidates.len()),
        });
    }
    let (bi, wi) = select_extremes(candidates).expect("nonempty");
    let (best, worst) = (&candidates[bi], &candidates[wi]);
    if bi == wi {
        return Ok(PairOutcome::Skip {
            reason: SkipReason::Degenerate,
            detail: "best and worst candidates coincide".into(),
        });
    }
    let margin = best.combined_score - worst.combined_score;
    if margin.is_nan() || margin < params.delta_min {
        return Ok(PairOutcome::Skip {
            reason: SkipReason::Margin,
            detail: format!("margin {margin:.6} below {}", params.delta_min),
        });
    }
    let refined = match refine(
        &best.description,
        &best.localization.b_gt,
        &best.detections,
        &params.refine,
    ) {
        Ok(r) => r,
        Err(e) => {
            return Ok(PairOutcome::Skip {
                reason: SkipReason::RefineFailed,
                detail: e.to_string(),
            })
        }
    };
    Ok(PairOutcome::Pair(PreferencePair {
        schema_version: PAIR_SCHEMA_VERSION,
        image_id: region.image_id,
        region_index: region.region_index,
        image_uri: region.uri.clone(),
        region_box: region.region_box,
        canonical_prompt: canonical_prompt.to_string(),
        chosen: serialize_grounded(&refined, convention),
        rejected: worst.raw_text.clone(),
        chosen_score: best.combined_score,
        rejected_score: worst.combined_score,
        margin,
        chosen_candidate: best.candidate,
        rejected_candidate: worst.candidate,
    }))
}

/// Sequence log-probabilities of the chosen and rejected responses under the
/// trained policy and the frozen reference model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoLogProbs {
    pub policy_chosen: f64,
    pub reference_chosen: f64,
    pub policy_rejected: f64,
    pub reference_rejected: f64,
}

impl DpoLogProbs {
    fn check(&self) -> Result<()> {
        let all = [
            self.policy_chosen,
            self.reference_chosen,
            self.policy_rejected,
            self.reference_rejected,
        ];
        if all.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("log-probability"))
        }
    }

    /// Chosen log-ratio minus rejected log-ratio.
    pub fn margin(&self) -> f64 {
        (self.policy_chosen - self.reference_chosen) - (self.policy_rejected - self.reference_rejected)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam {
            name: "beta",
            reason: format!("{beta} must be positive"),
        })
    }
}

/// `ln(1 + e^{-x}) = -ln σ(x)` without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// `σ(-x) = 1 / (1 + e^{x})` without overflow.
fn sigmoid_neg(x: f64) -> f64 {
    if x >= 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// Per-sample DPO loss `-ln σ(β·margin)`.
pub fn dpo_loss(lp: &DpoLogProbs, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    lp.check()?;
    Ok(neg_log_sigmoid(beta * lp.margin()))
}

/// Mean DPO loss over a batch.
pub fn dpo_loss_batch(batch: &[DpoLogProbs], beta: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("DPO batch"));
    }
    let mut total = 0.0;
    for lp in batch {
        total += dpo_loss(lp, beta)?;
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`dpo_loss`] with respect to
/// `(policy_chosen, reference_chosen, policy_rejected, reference_rejected)`.
pub fn dpo_loss_grad(lp: &DpoLogProbs, beta: f64) -> Result<[f64; 4]> {
    check_beta(beta)?;
    lp.check()?;
    let g = beta * sigmoid_neg(beta * lp.margin());
    Ok([-g, g, g, -g])
}
