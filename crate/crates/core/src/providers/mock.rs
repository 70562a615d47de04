//! Deterministic provider backed by the annotation records.
//!
//! The mock "sees" an image through its annotations:
//!
//! * `generate` writes a grounded description of the objects whose centers
//!   fall in the queried region. How many objects it mentions and how noisy
//!   their boxes are depends on the prompt hints (crop, object references) and
//!   on the sampling temperature.
//! * `embed` is a bag-of-words model: every word maps to a pseudo-random
//!   vector; text embeds to the sum over its words, an image region to the sum
//!   over the category words of the objects it contains.
//! * `detect` returns annotated objects whose category occurs in the query.
//!
//! Every output is a pure function of the request.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{full_to_crop, DetectRequest, Detection, EmbedRequest, EmbeddingVector, GenerationRequest, Provider};
use crate::dataset::{ImageRecord, ObjectAnnotation};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::grounded_text::{find_whole_word, parse_grounded, Convention};
use crate::hashing::{content_hash, seed_from_str};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub dim: usize,
    /// Coordinate convention used in prompts and generated text.
    pub convention: Convention,
    /// Box jitter applied to detections, as a fraction of box size.
    pub detect_jitter: f64,
    /// Weight of objects outside the box in local-attention embeddings.
    pub context_weight: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            convention: Convention::Norm999,
            detect_jitter: 0.02,
            context_weight: 0.25,
        }
    }
}

pub struct MockProvider {
    id: String,
    config: MockConfig,
    world: HashMap<String, ImageRecord>,
    canned: HashMap<String, String>,
}

const FILLER: &[&str] = &[
    "a", "an", "the", "in", "this", "region", "there", "is", "are", "and", "of", "with", "on",
];

impl MockProvider {
    /// The provider id covers the config and the records, so cached responses
    /// from a different mock world are never reused.
    pub fn new(records: &[ImageRecord], config: MockConfig) -> Self {
        let fingerprint = content_hash(&(&config, records)).expect("mock world serializes");
        Self {
            id: format!("mock:{}", &fingerprint[..16]),
            config,
            world: records.iter().map(|r| (r.uri.clone(), r.clone())).collect(),
            canned: HashMap::new(),
        }
    }

    /// Serves `text` for any generation request whose [`GenerationRequest::request_hash`] is `hash`.
    pub fn with_canned(mut self, hash: impl Into<String>, text: impl Into<String>) -> Self {
        self.canned.insert(hash.into(), text.into());
        self
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn image(&self, uri: &str) -> Result<&ImageRecord> {
        self.world.get(uri).ok_or_else(|| Error::Provider {
            code: "unknown_image".into(),
            message: format!("no image at {uri}"),
        })
    }

    fn rng_for<T: Serialize>(&self, tag: &str, req: &T) -> Result<ChaCha8Rng> {
        let h = content_hash(req)?;
        Ok(ChaCha8Rng::seed_from_u64(seed_from_str(&format!("{tag}:{h}"))))
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from_str(&format!("word:{word}")));
        (0..self.config.dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn bias(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from_str("bias"));
        (0..self.config.dim)
            .map(|_| 0.05 * rng.random_range(-1.0..1.0))
            .collect()
    }

    fn accumulate(&self, acc: &mut [f64], text: &str, weight: f64) {
        for word in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .filter(|w| !FILLER.contains(&w.as_str()))
        {
            for (a, v) in acc.iter_mut().zip(self.word_vector(&word)) {
                *a += weight * v;
            }
        }
    }

    fn region_embedding(&self, uri: &str, bbox: &BBox, context_weight: f64) -> Result<Vec<f64>> {
        let img = self.image(uri)?;
        let mut acc = self.bias();
        for obj in &img.objects {
            let (cx, cy) = obj.bbox.center();
            let inside = cx >= bbox.x1() && cx <= bbox.x2() && cy >= bbox.y1() && cy <= bbox.y2();
            let w = if inside { 1.0 } else { context_weight };
            if w > 0.0 {
                self.accumulate(&mut acc, &obj.category, w);
            }
        }
        Ok(acc)
    }

    fn region_of(&self, req: &GenerationRequest) -> Result<BBox> {
        if let Some(c) = req.crop {
            return Ok(c);
        }
        let parsed = parse_grounded(&req.prompt, req.image.width, req.image.height, self.config.convention);
        parsed.boxes.first().copied().ok_or_else(|| Error::Provider {
            code: "bad_prompt".into(),
            message: "prompt carries no region box".into(),
        })
    }
}

/// Jitters each side by up to `frac` of the box size, clipped to the image.
fn jitter(rng: &mut ChaCha8Rng, b: &BBox, frac: f64, width: f64, height: f64) -> Option<BBox> {
    if frac <= 0.0 {
        return Some(*b);
    }
    let (w, h) = (b.width(), b.height());
    let mut d = |scale: f64| rng.random_range(-1.0..1.0) * frac * scale;
    let x1 = (b.x1() + d(w)).clamp(0.0, width);
    let y1 = (b.y1() + d(h)).clamp(0.0, height);
    let x2 = (b.x2() + d(w)).clamp(0.0, width);
    let y2 = (b.y2() + d(h)).clamp(0.0, height);
    BBox::new(x1, y1, x2, y2).ok()
}

fn center_inside(obj: &ObjectAnnotation, region: &BBox) -> bool {
    let (cx, cy) = obj.bbox.center();
    cx >= region.x1() && cx <= region.x2() && cy >= region.y1() && cy <= region.y2()
}

impl Provider for MockProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        if let Some(text) = self.canned.get(&req.request_hash()?) {
            return Ok(text.clone());
        }
        let img = self.image(&req.image.uri)?;
        let region = self.region_of(req)?;
        let mut rng = self.rng_for("generate", req)?;
        let (w, h) = (img.width as f64, img.height as f64);

        let has_crop = req.crop.is_some();
        let has_refs = !req.object_refs.is_empty();
        let (mention, noise, grounded, hallucinate) = match (has_crop, has_refs) {
            (false, false) => (0.5, 0.30, 0.70, 0.35),
            (true, false) => (0.65, 0.15, 0.85, 0.2),
            (false, true) => (0.9, 0.08, 0.9, 0.1),
            (true, true) => (0.95, 0.05, 0.95, 0.05),
        };
        let temp = req.sampling.temperature.clamp(0.0, 2.0);
        let noise = noise * (0.5 + temp);

        let mut parts = Vec::new();
        for obj in img.objects.iter().filter(|o| center_inside(o, &region)) {
            if !rng.random_bool(mention) {
                continue;
            }
            let mut phrase = format!("a {}", obj.category.to_lowercase());
            if rng.random_bool(grounded) {
                if let Some(b) = jitter(&mut rng, &obj.bbox, noise, w, h) {
                    phrase.push(' ');
                    phrase.push_str(&self.config.convention.format_box(&b, img.width, img.height));
                }
            }
            parts.push(phrase);
        }
        if rng.random_bool(hallucinate) {
            let others: Vec<&ObjectAnnotation> = img.objects.iter().filter(|o| !center_inside(o, &region)).collect();
            if !others.is_empty() {
                let o = others[rng.random_range(0..others.len())];
                let x = rng.random_range(region.x1()..region.x2());
                let y = rng.random_range(region.y1()..region.y2());
                let fake = BBox::new(x, y, (x + o.bbox.width()).min(w), (y + o.bbox.height()).min(h));
                let mut phrase = format!("a {}", o.category.to_lowercase());
                if let Ok(b) = fake {
                    phrase.push(' ');
                    phrase.push_str(&self.config.convention.format_box(&b, img.width, img.height));
                }
                parts.push(phrase);
            }
        }

        Ok(match parts.len() {
            0 => "In this region there is nothing notable.".to_string(),
            1 => format!("In this region there is {}.", parts[0]),
            n => format!(
                "In this region there is {} and {}.",
                parts[..n - 1].join(", "),
                parts[n - 1]
            ),
        })
    }

    fn embed(&self, req: &EmbedRequest) -> Result<EmbeddingVector> {
        let model = format!("mock-bow-{}", self.config.dim);
        let values = match req {
            EmbedRequest::Text { text } => {
                let mut acc = self.bias();
                self.accumulate(&mut acc, text, 1.0);
                acc
            }
            EmbedRequest::Crop { image, bbox } => self.region_embedding(&image.uri, bbox, 0.0)?,
            EmbedRequest::Local { image, bbox } => {
                self.region_embedding(&image.uri, bbox, self.config.context_weight)?
            }
        };
        EmbeddingVector::new(values, model)
    }

    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>> {
        let img = self.image(&req.image.uri)?;
        let mut rng = self.rng_for("detect", req)?;
        let (w, h) = (img.width as f64, img.height as f64);
        let mut out = Vec::new();
        for obj in &img.objects {
            if find_whole_word(&req.query, &obj.category).is_none() {
                continue;
            }
            let Some(visible) = obj.bbox.intersection(&req.crop) else {
                continue;
            };
            if visible.area() < 0.5 * obj.bbox.area() {
                continue;
            }
            let confidence = rng.random_range(0.3..1.0);
            let Some(jittered) = jitter(&mut rng, &visible, self.config.detect_jitter, w, h) else {
                continue;
            };
            if let Some(local) = full_to_crop(&jittered, &req.crop) {
                out.push(Detection {
                    phrase: obj.category.to_lowercase(),
                    bbox: local,
                    confidence,
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ImageId, ObjectId};
    use crate::providers::{detect_full_frame, embed_crop, embed_local, embed_text, ImageLocator, Sampling};
    use crate::scoring::cosine;

    fn world() -> Vec<ImageRecord> {
        let mk = |id: u64, cat: &str, x: f64, y: f64| ObjectAnnotation {
            object_id: ObjectId(id),
            category: cat.into(),
            bbox: BBox::new(x, y, x + 10.0, y + 10.0).unwrap(),
        };
        vec![ImageRecord {
            image_id: ImageId(1),
            uri: "img1.jpg".into(),
            width: 200,
            height: 200,
            objects: vec![
                mk(1, "dog", 50.0, 50.0),
                mk(2, "cat", 70.0, 60.0),
                mk(3, "red car", 80.0, 80.0),
                mk(4, "tree", 150.0, 150.0),
            ],
        }]
    }

    fn loc() -> ImageLocator {
        ImageLocator {
            uri: "img1.jpg".into(),
            width: 200,
            height: 200,
        }
    }

    fn gen_req(seed: u64) -> GenerationRequest {
        GenerationRequest {
            image: loc(),
            crop: Some(BBox::new(40., 40., 100., 100.).unwrap()),
            prompt: "Describe the region.".into(),
            object_refs: vec![],
            sampling: Sampling { temperature: 0.7, seed },
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = MockProvider::new(&world(), MockConfig::default());
        let a = p.generate(&gen_req(1)).unwrap();
        assert_eq!(a, p.generate(&gen_req(1)).unwrap());
        let texts: std::collections::BTreeSet<_> = (0..10).map(|s| p.generate(&gen_req(s)).unwrap()).collect();
        assert!(texts.len() > 1);
    }

    #[test]
    fn canned_fixture_served_by_hash() {
        let req = gen_req(5);
        let p = MockProvider::new(&world(), MockConfig::default())
            .with_canned(req.request_hash().unwrap(), "a canned dog [1, 1, 5, 5]");
        assert_eq!(p.generate(&req).unwrap(), "a canned dog [1, 1, 5, 5]");
        assert_ne!(p.generate(&gen_req(6)).unwrap(), "a canned dog [1, 1, 5, 5]");
    }

    #[test]
    fn crop_outside_image_rejected_before_provider() {
        let p = MockProvider::new(&world(), MockConfig::default());
        let mut req = gen_req(1);
        req.crop = Some(BBox::new(150., 150., 250., 250.).unwrap());
        assert!(matches!(
            crate::providers::generate(&p, &req),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn embeddings_deterministic_with_declared_dim() {
        let cfg = MockConfig {
            dim: 32,
            ..Default::default()
        };
        let p = MockProvider::new(&world(), cfg);
        let a = embed_text(&p, "a dog and a cat").unwrap();
        assert_eq!(a, embed_text(&p, "a dog and a cat").unwrap());
        assert_eq!(a.dim(), 32);
        let full = loc();
        let whole = BBox::new(0., 0., 200., 200.).unwrap();
        let local = embed_local(&p, &full, &whole).unwrap();
        let crop = embed_crop(&p, &full, &whole).unwrap();
        assert!(cosine(&local, &crop).unwrap() >= 0.99);
    }

    #[test]
    fn text_matching_region_is_more_similar() {
        let p = MockProvider::new(&world(), MockConfig::default());
        let region = BBox::new(40., 40., 100., 100.).unwrap();
        let crop = embed_crop(&p, &loc(), &region).unwrap();
        let good = embed_text(&p, "a dog, a cat and a red car").unwrap();
        let bad = embed_text(&p, "a tree").unwrap();
        assert!(cosine(&crop, &good).unwrap() > cosine(&crop, &bad).unwrap());
    }

    #[test]
    fn detections_translate_to_full_frame() {
        let cfg = MockConfig {
            detect_jitter: 0.0,
            ..Default::default()
        };
        let p = MockProvider::new(&world(), cfg);
        let req = DetectRequest {
            image: loc(),
            crop: BBox::new(50., 50., 100., 100.).unwrap(),
            query: "a dog near a tree".into(),
            box_threshold: 0.0,
        };
        let raw = p.detect(&req).unwrap();
        assert_eq!(raw.len(), 1);
        assert_eq!(raw[0].bbox, BBox::new(0., 0., 10., 10.).unwrap());
        let full = detect_full_frame(&p, &req).unwrap();
        assert_eq!(full[0].bbox, BBox::new(50., 50., 60., 60.).unwrap());
        assert_eq!(full[0].phrase, "dog");
    }

    #[test]
    fn randomized_crops_stay_inside() {
        let p = MockProvider::new(&world(), MockConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = rng.random_range(0.0..150.0);
            let y = rng.random_range(0.0..150.0);
            let crop = BBox::new(
                x,
                y,
                (x + rng.random_range(10.0..120.0f64)).min(200.0),
                (y + rng.random_range(10.0..120.0f64)).min(200.0),
            )
            .unwrap();
            let req = DetectRequest {
                image: loc(),
                crop,
                query: "dog cat red car tree".into(),
                box_threshold: 0.0,
            };
            for d in detect_full_frame(&p, &req).unwrap() {
                assert!(crop.contains(&d.bbox), "{:?} not in {:?}", d.bbox, crop);
            }
        }
    }
}
