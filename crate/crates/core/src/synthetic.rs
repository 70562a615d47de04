//! Synthetic COCO-style annotation files for demos and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub const CATEGORIES: &[&str] = &[
    "dog", "cat", "car", "person", "tree", "bicycle", "bench", "bird", "cup", "chair", "bottle", "umbrella",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub width: u32,
    pub height: u32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            images: 20,
            min_objects: 6,
            max_objects: 14,
            width: 640,
            height: 480,
        }
    }
}

/// COCO annotation JSON with integer-pixel boxes; a pure function of `(spec, seed)`.
pub fn synthetic_coco(spec: &SyntheticSpec, seed: u64) -> Value {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut images = Vec::with_capacity(spec.images);
    let mut annotations = Vec::new();
    let mut next_ann = 1u64;
    for i in 0..spec.images {
        let image_id = i as u64 + 1;
        images.push(json!({
            "id": image_id,
            "file_name": format!("synthetic_{image_id:05}.jpg"),
            "width": spec.width,
            "height": spec.height,
        }));
        let n = rng.random_range(spec.min_objects..=spec.max_objects.max(spec.min_objects));
        for _ in 0..n {
            let bw = rng.random_range(16.0..w / 4.0).round();
            let bh = rng.random_range(16.0..h / 4.0).round();
            let x = rng.random_range(0.0..w - bw).round();
            let y = rng.random_range(0.0..h - bh).round();
            annotations.push(json!({
                "id": next_ann,
                "image_id": image_id,
                "category_id": rng.random_range(0..CATEGORIES.len()) + 1,
                "bbox": [x, y, bw, bh],
                "iscrowd": 0,
            }));
            next_ann += 1;
        }
    }
    let categories: Vec<Value> = CATEGORIES
        .iter()
        .enumerate()
        .map(|(i, c)| json!({"id": i + 1, "name": c}))
        .collect();
    json!({"images": images, "annotations": annotations, "categories": categories})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::parse_annotations;

    #[test]
    fn parses_and_is_deterministic() {
        let spec = SyntheticSpec {
            images: 5,
            ..Default::default()
        };
        let a = synthetic_coco(&spec, 7);
        assert_eq!(a, synthetic_coco(&spec, 7));
        assert_ne!(a, synthetic_coco(&spec, 8));
        let recs = parse_annotations(&a.to_string(), None).unwrap();
        assert_eq!(recs.len(), 5);
        assert!(recs.iter().all(|r| (6..=14).contains(&r.objects.len())));
    }
}
