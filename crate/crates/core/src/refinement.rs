//! Grounding refinement for the preferred description.
//!
//! 1. Anchors are matched one-to-one to ground-truth boxes, greedily in
//!    descending IoU, among pairs with IoU above `match_iou`; a matched anchor
//!    takes its ground-truth box.
//! 2. Unmatched anchors lose their box; their phrase stays in the text.
//! 3. A detection whose box matches a still unused ground-truth box, and whose
//!    phrase occurs as a whole word in the text outside every anchor, adds an
//!    anchor at the phrase's first occurrence carrying that ground-truth box
//!    (the best-IoU one when several match).
//! 4. Anchors with the same normalized phrase and boxes overlapping above
//!    `dedup_iou` keep only the earliest one.
//!
//! The plain text never changes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, DEFAULT_DEDUP_IOU};
use crate::grounded_text::{find_whole_word, normalize_phrase, GroundAnchor, GroundedDescription};
use crate::providers::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineParams {
    /// A prediction matches a ground-truth box when their IoU exceeds this.
    pub match_iou: f64,
    pub dedup_iou: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            match_iou: 0.5,
            dedup_iou: DEFAULT_DEDUP_IOU,
        }
    }
}

/// Greedy one-to-one assignment in descending IoU. Returns, per anchor, the
/// index of its ground-truth box.
fn match_anchors(anchors: &[GroundAnchor], b_gt: &[BBox], min_iou: f64) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in b_gt.iter().enumerate() {
            let v = iou(&a.bbox, g);
            if v > min_iou {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let mut anchor_gt = vec![None; anchors.len()];
    let mut gt_used = vec![false; b_gt.len()];
    for (_, i, j) in pairs {
        if anchor_gt[i].is_none() && !gt_used[j] {
            anchor_gt[i] = Some(j);
            gt_used[j] = true;
        }
    }
    anchor_gt
}

fn overlaps(a: &GroundAnchor, start: usize, end: usize) -> bool {
    a.start < end && start < a.end
}

pub fn refine(
    desc: &GroundedDescription,
    b_gt: &[BBox],
    detections: &[Detection],
    params: &RefineParams,
) -> Result<GroundedDescription> {
    if b_gt.is_empty() {
        return Err(Error::Empty("ground-truth box list for refinement"));
    }

    let assignment = match_anchors(&desc.anchors, b_gt, params.match_iou);
    let mut gt_used = vec![false; b_gt.len()];
    let mut anchors: Vec<GroundAnchor> = Vec::with_capacity(desc.anchors.len());
    for (a, m) in desc.anchors.iter().zip(&assignment) {
        if let Some(j) = *m {
            gt_used[j] = true;
            anchors.push(GroundAnchor {
                bbox: b_gt[j],
                ..a.clone()
            });
        }
    }

    for det in detections {
        let best = b_gt
            .iter()
            .enumerate()
            .filter(|(j, _)| !gt_used[*j])
            .map(|(j, g)| (j, iou(&det.bbox, g)))
            .filter(|(_, v)| *v > params.match_iou)
            .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)));
        let Some((j, _)) = best else { continue };
        let phrase = det.phrase.trim();
        let Some(start) = find_whole_word(&desc.plain_text, phrase) else {
            continue;
        };
        let end = start + phrase.len();
        if anchors.iter().any(|a| overlaps(a, start, end)) {
            continue;
        }
        gt_used[j] = true;
        let pos = anchors.partition_point(|a| a.start < start);
        anchors.insert(
            pos,
            GroundAnchor {
                phrase: desc.plain_text[start..end].to_string(),
                start,
                end,
                bbox: b_gt[j],
            },
        );
    }

    let mut kept: Vec<GroundAnchor> = Vec::with_capacity(anchors.len());
    for a in anchors {
        let norm = normalize_phrase(&a.phrase);
        let dup = kept
            .iter()
            .any(|k| normalize_phrase(&k.phrase) == norm && iou(&k.bbox, &a.bbox) > params.dedup_iou);
        if !dup {
            kept.push(a);
        }
    }

    let out = GroundedDescription {
        plain_text: desc.plain_text.clone(),
        anchors: kept,
        source_frame: desc.source_frame,
    };
    debug_assert!(out.validate().is_ok());
    Ok(out)
}
