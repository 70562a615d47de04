//! IoU-thresholded metrics for referring expressions and phrase grounding.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, merge_boxes, BBox};
use crate::grounded_text::{normalize_phrase, parse_grounded, Convention, GroundAnchor};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Token overlap `|query ∩ anchor| / |query|` needed for a fuzzy phrase match.
pub const PHRASE_OVERLAP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecSample {
    pub image_width: u32,
    pub image_height: u32,
    pub expression: String,
    pub gt_box: BBox,
    pub model_output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub image_width: u32,
    pub image_height: u32,
    pub phrases: Vec<String>,
    pub gt_boxes: Vec<Vec<BBox>>,
    pub model_output: String,
}

impl GroundingSample {
    pub fn validate(&self) -> Result<()> {
        if self.phrases.len() != self.gt_boxes.len() {
            return Err(Error::Schema {
                field: "gt_boxes".into(),
                message: format!(
                    "{} phrases but {} ground-truth lists",
                    self.phrases.len(),
                    self.gt_boxes.len()
                ),
            });
        }
        if let Some(i) = self.gt_boxes.iter().position(Vec::is_empty) {
            return Err(Error::Schema {
                field: format!("gt_boxes[{i}]"),
                message: "empty box list".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub metric: String,
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub correct: Vec<usize>,
    pub total: usize,
    /// Samples (REC) or phrases (grounding) with no usable prediction.
    pub unmatched: usize,
}

impl fmt::Display for ThresholdTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>9}  {:>9}  {:>7}  {:>7}",
            "threshold", self.metric, "correct", "total"
        )?;
        for ((t, v), c) in self.thresholds.iter().zip(&self.values).zip(&self.correct) {
            writeln!(f, "{t:>9.2}  {v:>9.4}  {c:>7}  {:>7}", self.total)?;
        }
        write!(f, "unmatched: {}", self.unmatched)
    }
}

pub fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::Empty("threshold list"));
    }
    for (i, t) in thresholds.iter().enumerate() {
        if !(*t > 0.0 && *t < 1.0) {
            return Err(Error::InvalidParam {
                name: "thresholds",
                reason: format!("{t} is outside (0, 1)"),
            });
        }
        if i > 0 && thresholds[i - 1] >= *t {
            return Err(Error::InvalidParam {
                name: "thresholds",
                reason: "must be strictly ascending".into(),
            });
        }
    }
    Ok(())
}

/// Parses `0.5,0.6,0.7` as given on the command line.
pub fn parse_thresholds(s: &str) -> Result<Vec<f64>> {
    let ts = s
        .split(',')
        .map(|p| {
            p.trim().parse::<f64>().map_err(|e| Error::InvalidParam {
                name: "thresholds",
                reason: format!("{p:?}: {e}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    validate_thresholds(&ts)?;
    Ok(ts)
}

fn tabulate(metric: &str, thresholds: &[f64], ious: &[Option<f64>]) -> ThresholdTable {
    let correct: Vec<usize> = thresholds
        .iter()
        .map(|t| ious.iter().filter(|v| matches!(v, Some(v) if *v >= *t)).count())
        .collect();
    let total = ious.len();
    ThresholdTable {
        metric: metric.to_string(),
        thresholds: thresholds.to_vec(),
        values: correct
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect(),
        correct,
        total,
        unmatched: ious.iter().filter(|v| v.is_none()).count(),
    }
}

/// IoU of the earliest well-formed box in the output, if any.
pub fn rec_iou(sample: &RecSample, convention: Convention) -> Option<f64> {
    let parsed = parse_grounded(
        &sample.model_output,
        sample.image_width,
        sample.image_height,
        convention,
    );
    parsed.boxes.first().map(|b| iou(b, &sample.gt_box))
}

pub fn eval_rec(samples: &[RecSample], thresholds: &[f64], convention: Convention) -> Result<ThresholdTable> {
    validate_thresholds(thresholds)?;
    let ious: Vec<Option<f64>> = samples.par_iter().map(|s| rec_iou(s, convention)).collect();
    Ok(tabulate("accuracy", thresholds, &ious))
}

fn tokens(s: &str) -> Vec<String> {
    normalize_phrase(s).split_whitespace().map(str::to_string).collect()
}

/// Anchors answering `query`: exact normalized matches when there are any,
/// otherwise anchors sharing at least [`PHRASE_OVERLAP`] of the query tokens.
pub fn matching_anchors<'a>(query: &str, anchors: &'a [GroundAnchor]) -> Vec<&'a GroundAnchor> {
    let q = normalize_phrase(query);
    let exact: Vec<_> = anchors.iter().filter(|a| normalize_phrase(&a.phrase) == q).collect();
    if !exact.is_empty() {
        return exact;
    }
    let qt = tokens(query);
    if qt.is_empty() {
        return Vec::new();
    }
    anchors
        .iter()
        .filter(|a| {
            let at = tokens(&a.phrase);
            let shared = qt.iter().filter(|t| at.contains(t)).count();
            shared as f64 / qt.len() as f64 >= PHRASE_OVERLAP
        })
        .collect()
}

/// Per-phrase IoU between merged predictions and merged ground truth.
pub fn grounding_ious(sample: &GroundingSample, convention: Convention) -> Result<Vec<Option<f64>>> {
    sample.validate()?;
    let parsed = parse_grounded(
        &sample.model_output,
        sample.image_width,
        sample.image_height,
        convention,
    );
    let anchors = &parsed.description.anchors;
    sample
        .phrases
        .iter()
        .zip(&sample.gt_boxes)
        .map(|(phrase, gts)| {
            let gt = merge_boxes(gts)?;
            let preds: Vec<BBox> = matching_anchors(phrase, anchors).iter().map(|a| a.bbox).collect();
            if preds.is_empty() {
                return Ok(None);
            }
            Ok(Some(iou(&merge_boxes(&preds)?, &gt)))
        })
        .collect()
}

pub fn eval_grounding_merge(
    samples: &[GroundingSample],
    thresholds: &[f64],
    convention: Convention,
) -> Result<ThresholdTable> {
    validate_thresholds(thresholds)?;
    let per_sample: Vec<Vec<Option<f64>>> = samples
        .par_iter()
        .map(|s| grounding_ious(s, convention))
        .collect::<Result<_>>()?;
    let ious: Vec<Option<f64>> = per_sample.into_iter().flatten().collect();
    Ok(tabulate("recall@1", thresholds, &ious))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn rec(gt: BBox, output: &str) -> RecSample {
        RecSample {
            image_width: 200,
            image_height: 200,
            expression: "the thing".into(),
            gt_box: gt,
            model_output: output.into(),
        }
    }

    /// A box of height `pct` against a 100x100 ground truth: IoU is `pct / 100`.
    fn with_iou(pct: u32) -> String {
        format!("it is here [0, 0, 100, {pct}]")
    }

    #[test]
    fn exact_predictions_score_one() {
        let s = rec(b(10., 10., 50., 60.), "the dog [10, 10, 50, 60]");
        let t = eval_rec(&[s.clone(), s], &DEFAULT_THRESHOLDS, Convention::Pixel).unwrap();
        assert_eq!(t.values, vec![1.0; 5]);
    }

    #[test]
    fn low_overlap_is_never_correct() {
        let s = rec(b(5., 5., 15., 15.), "x [0, 0, 10, 10]");
        let v = rec_iou(&s, Convention::Pixel).unwrap();
        assert!((v - 25.0 / 175.0).abs() < 1e-12);
        let t = eval_rec(&[s], &DEFAULT_THRESHOLDS, Convention::Pixel).unwrap();
        assert_eq!(t.values, vec![0.0; 5]);
    }

    #[test]
    fn rec_fixture() {
        let gt = b(0., 0., 100., 100.);
        let mut samples = Vec::new();
        for (v, n) in [(100, 4), (85, 3), (55, 3)] {
            for _ in 0..n {
                samples.push(rec(gt, &with_iou(v)));
            }
        }
        let t = eval_rec(&samples, &DEFAULT_THRESHOLDS, Convention::Pixel).unwrap();
        assert_eq!(t.values, vec![1.0, 0.7, 0.7, 0.7, 0.4]);
        assert_eq!(t.correct, vec![10, 7, 7, 7, 4]);
    }

    #[test]
    fn unparseable_counts_incorrect() {
        let t = eval_rec(
            &[
                rec(b(0., 0., 10., 10.), "no box here"),
                rec(b(0., 0., 10., 10.), "x [0, 0, 10, 10]"),
            ],
            &[0.5],
            Convention::Pixel,
        )
        .unwrap();
        assert_eq!(t.values, vec![0.5]);
        assert_eq!(t.unmatched, 1);
    }

    #[test]
    fn first_box_wins() {
        let s = rec(b(0., 0., 10., 10.), "x [50, 50, 60, 60] y [0, 0, 10, 10]");
        assert_eq!(rec_iou(&s, Convention::Pixel), Some(0.0));
    }

    #[test]
    fn thresholds_are_checked() {
        assert!(validate_thresholds(&[]).is_err());
        assert!(validate_thresholds(&[0.0]).is_err());
        assert!(validate_thresholds(&[1.0]).is_err());
        assert!(validate_thresholds(&[0.6, 0.5]).is_err());
        assert_eq!(parse_thresholds("0.5, 0.75").unwrap(), vec![0.5, 0.75]);
        assert!(parse_thresholds("0.5,x").is_err());
    }

    fn grounding(phrases: &[&str], gts: Vec<Vec<BBox>>, output: &str) -> GroundingSample {
        GroundingSample {
            image_width: 200,
            image_height: 200,
            phrases: phrases.iter().map(|s| s.to_string()).collect(),
            gt_boxes: gts,
            model_output: output.into(),
        }
    }

    #[test]
    fn merged_ground_truth() {
        let s = grounding(
            &["two dogs"],
            vec![vec![b(0., 0., 10., 10.), b(20., 20., 30., 30.)]],
            "I see two dogs [0, 0, 30, 30].",
        );
        let t = eval_grounding_merge(&[s], &DEFAULT_THRESHOLDS, Convention::Pixel).unwrap();
        assert_eq!(t.values, vec![1.0; 5]);
    }

    #[test]
    fn predictions_merge_per_phrase() {
        let s = grounding(
            &["a dog", "a cat"],
            vec![vec![b(0., 0., 30., 30.)], vec![b(100., 100., 120., 120.)]],
            "a dog [0, 0, 10, 10] and a dog [20, 20, 30, 30] near a cat [100, 100, 120, 120]",
        );
        assert_eq!(
            grounding_ious(&s, Convention::Pixel).unwrap(),
            vec![Some(1.0), Some(1.0)]
        );
    }

    #[test]
    fn missing_phrase_is_incorrect() {
        let s = grounding(&["a horse"], vec![vec![b(0., 0., 10., 10.)]], "a dog [0, 0, 10, 10]");
        let t = eval_grounding_merge(&[s], &[0.5], Convention::Pixel).unwrap();
        assert_eq!(t.values, vec![0.0]);
        assert_eq!(t.unmatched, 1);
    }

    #[test]
    fn fuzzy_phrase_match() {
        let s = grounding(
            &["the red car"],
            vec![vec![b(0., 0., 10., 10.)]],
            "a red car [0, 0, 10, 10] parked",
        );
        assert_eq!(grounding_ious(&s, Convention::Pixel).unwrap(), vec![Some(1.0)]);
        let anchors = parse_grounded("big red truck [0, 0, 5, 5]", 10, 10, Convention::Pixel)
            .description
            .anchors;
        // one of two query tokens is shared
        assert_eq!(matching_anchors("red car", &anchors).len(), 1);
        assert!(matching_anchors("blue car", &anchors).is_empty());
    }

    #[test]
    fn mismatched_phrase_count_is_schema_error() {
        let s = grounding(&["a", "b"], vec![vec![b(0., 0., 1., 1.)]], "");
        assert!(matches!(
            grounding_ious(&s, Convention::Pixel),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn merge_fixture_recount() {
        let gt = b(0., 0., 100., 100.);
        let phrases = ["p0", "p1", "p2", "p3", "p4"];
        let mut out = String::new();
        for (p, v) in phrases.iter().zip([100, 90, 70, 40]) {
            out.push_str(&format!("the {p} [0, 0, 100, {v}] "));
        }
        out.push_str("the p4 [150, 150, 160, 160]");
        let s = grounding(&phrases, vec![vec![gt]; 5], &out);
        let ious: Vec<f64> = grounding_ious(&s, Convention::Pixel)
            .unwrap()
            .into_iter()
            .map(Option::unwrap)
            .collect();
        assert_eq!(ious, vec![1.0, 0.9, 0.7, 0.4, 0.0]);
        let t = eval_grounding_merge(&[s], &DEFAULT_THRESHOLDS, Convention::Pixel).unwrap();
        // IoU 0.9 meets the 0.9 threshold under the `>=` rule
        assert_eq!(t.values, vec![0.6, 0.6, 0.6, 0.4, 0.4]);
    }

    #[test]
    fn table_renders() {
        let t = tabulate("accuracy", &[0.5, 0.9], &[Some(1.0), Some(0.6), None]);
        let s = t.to_string();
        assert!(s.contains("accuracy"));
        assert!(s.lines().nth(1).unwrap().contains("0.6667"));
        assert!(s.ends_with("unmatched: 1"));
    }

    proptest! {
        #[test]
        fn rec_is_monotone_and_permutation_invariant(
            boxes in prop::collection::vec((0u32..90, 0u32..90, 1u32..60, 1u32..60), 1..30),
            rot in 0usize..30,
        ) {
            let samples: Vec<RecSample> = boxes
                .iter()
                .map(|&(x, y, w, h)| rec(b(20., 20., 70., 80.), &format!("x [{x}, {y}, {}, {}]", x + w, y + h)))
                .collect();
            let ts = [0.1, 0.3, 0.5, 0.7, 0.9];
            let t = eval_rec(&samples, &ts, Convention::Pixel).unwrap();
            prop_assert!(t.values.windows(2).all(|w| w[0] >= w[1]));
            let mut rotated = samples.clone();
            rotated.rotate_left(rot % samples.len());
            prop_assert_eq!(eval_rec(&rotated, &ts, Convention::Pixel).unwrap(), t);
        }
    }
}
