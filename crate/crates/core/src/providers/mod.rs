//! External model capabilities: generation, embedding and detection.
//!
//! All three sit behind the [`Provider`] trait. [`MockProvider`] is a
//! deterministic stand-in driven by the annotation records, [`HttpProvider`]
//! speaks the JSON contract documented in `docs/provider-contract.md`, and
//! [`CachedProvider`] wraps either with a content-addressed response cache.

mod cache;
mod http;
mod mock;

use serde::{Deserialize, Serialize};

pub use cache::{CachedProvider, ProviderStats, ResponseCache};
pub use http::{HttpConfig, HttpProvider, ImageTransport, CONTRACT_VERSION};
pub use mock::{MockConfig, MockProvider};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::hashing::content_hash;

pub const DEFAULT_BOX_THRESHOLD: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageLocator {
    pub uri: String,
    pub width: u32,
    pub height: u32,
}

impl ImageLocator {
    fn check_box(&self, b: &BBox, what: &str) -> Result<()> {
        if b.within(self.width as f64, self.height as f64) {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "{what} {:?} lies outside the {}x{} image",
                b.coords(),
                self.width,
                self.height
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRef {
    pub category: String,
    #[serde(rename = "box")]
    pub box_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub image: ImageLocator,
    pub crop: Option<BBox>,
    pub prompt: String,
    pub object_refs: Vec<ObjectRef>,
    pub sampling: Sampling,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(Error::Precondition("prompt is empty".into()));
        }
        if let Some(c) = &self.crop {
            self.image.check_box(c, "crop box")?;
        }
        Ok(())
    }

    /// Content hash of the canonical request, used to key canned fixtures.
    pub fn request_hash(&self) -> Result<String> {
        content_hash(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EmbedRequest {
    Text {
        text: String,
    },
    /// Embedding of the cropped region.
    Crop {
        image: ImageLocator,
        #[serde(rename = "box")]
        bbox: BBox,
    },
    /// Full-image embedding whose final aggregation only attends inside the box.
    Local {
        image: ImageLocator,
        #[serde(rename = "box")]
        bbox: BBox,
    },
}

impl EmbedRequest {
    pub fn validate(&self) -> Result<()> {
        match self {
            EmbedRequest::Text { .. } => Ok(()),
            EmbedRequest::Crop { image, bbox } | EmbedRequest::Local { image, bbox } => {
                image.check_box(bbox, "embedding box")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, model: impl Into<String>) -> Result<Self> {
        let v = Self {
            values,
            model: model.into(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding value"));
        }
        if self.norm() == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub image: ImageLocator,
    /// Crop to run the detector on, in full-image pixels.
    #[serde(rename = "box")]
    pub crop: BBox,
    pub query: String,
    pub box_threshold: f64,
}

impl DetectRequest {
    pub fn validate(&self) -> Result<()> {
        if self.query.trim().is_empty() {
            return Err(Error::Precondition("detection query is empty".into()));
        }
        self.image.check_box(&self.crop, "detection crop")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub phrase: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

pub trait Provider: Send + Sync {
    /// Stable identifier, part of every cache key.
    fn id(&self) -> &str;

    fn generate(&self, req: &GenerationRequest) -> Result<String>;

    fn embed(&self, req: &EmbedRequest) -> Result<EmbeddingVector>;

    /// Detections in the crop frame of `req.crop`.
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>>;
}

impl<P: Provider + ?Sized> Provider for &P {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        (**self).generate(req)
    }
    fn embed(&self, req: &EmbedRequest) -> Result<EmbeddingVector> {
        (**self).embed(req)
    }
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>> {
        (**self).detect(req)
    }
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        (**self).generate(req)
    }
    fn embed(&self, req: &EmbedRequest) -> Result<EmbeddingVector> {
        (**self).embed(req)
    }
    fn detect(&self, req: &DetectRequest) -> Result<Vec<Detection>> {
        (**self).detect(req)
    }
}

/// Crop-frame box to full-image frame, clipped to the crop extent.
///
/// Returns `None` when nothing of the box remains inside the crop.
pub fn crop_to_full(b: &BBox, crop: &BBox) -> Option<BBox> {
    let extent = BBox::new(0.0, 0.0, crop.width(), crop.height()).ok()?;
    let inside = b.intersection(&extent)?;
    inside.translate(crop.x1(), crop.y1()).ok()
}

/// Full-image box to the crop frame, clipped to the crop.
pub fn full_to_crop(b: &BBox, crop: &BBox) -> Option<BBox> {
    b.intersection(crop)?.translate(-crop.x1(), -crop.y1()).ok()
}

pub fn generate(p: &dyn Provider, req: &GenerationRequest) -> Result<String> {
    req.validate()?;
    p.generate(req)
}

fn checked_embed(p: &dyn Provider, req: &EmbedRequest) -> Result<EmbeddingVector> {
    req.validate()?;
    let v = p.embed(req)?;
    v.validate()?;
    Ok(v)
}

pub fn embed_text(p: &dyn Provider, text: &str) -> Result<EmbeddingVector> {
    checked_embed(p, &EmbedRequest::Text { text: text.to_string() })
}

pub fn embed_crop(p: &dyn Provider, image: &ImageLocator, bbox: &BBox) -> Result<EmbeddingVector> {
    checked_embed(
        p,
        &EmbedRequest::Crop {
            image: image.clone(),
            bbox: *bbox,
        },
    )
}

pub fn embed_local(p: &dyn Provider, image: &ImageLocator, bbox: &BBox) -> Result<EmbeddingVector> {
    checked_embed(
        p,
        &EmbedRequest::Local {
            image: image.clone(),
            bbox: *bbox,
        },
    )
}

/// Runs the detector and returns detections in the full-image frame, dropping
/// those below the request threshold.
pub fn detect_full_frame(p: &dyn Provider, req: &DetectRequest) -> Result<Vec<Detection>> {
    req.validate()?;
    let raw = p.detect(req)?;
    let mut out = Vec::with_capacity(raw.len());
    for d in raw {
        if !(0.0..=1.0).contains(&d.confidence) {
            return Err(Error::Provider {
                code: "invalid_response".into(),
                message: format!("detection confidence {} outside [0, 1]", d.confidence),
            });
        }
        if d.confidence < req.box_threshold {
            continue;
        }
        if let Some(bbox) = crop_to_full(&d.bbox, &req.crop) {
            out.push(Detection { bbox, ..d });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn translation_offsets_by_crop_origin() {
        let crop = b(50., 50., 100., 100.);
        assert_eq!(crop_to_full(&b(0., 0., 10., 10.), &crop), Some(b(50., 50., 60., 60.)));
        assert_eq!(full_to_crop(&b(50., 50., 60., 60.), &crop), Some(b(0., 0., 10., 10.)));
        // clipped to the crop extent
        assert_eq!(
            crop_to_full(&b(40., 40., 70., 70.), &crop),
            Some(b(90., 90., 100., 100.))
        );
        assert_eq!(crop_to_full(&b(60., 60., 70., 70.), &crop), None);
    }

    #[test]
    fn request_preconditions() {
        let image = ImageLocator {
            uri: "a.jpg".into(),
            width: 100,
            height: 100,
        };
        let mut req = GenerationRequest {
            image: image.clone(),
            crop: Some(b(10., 10., 120., 50.)),
            prompt: "describe".into(),
            object_refs: vec![],
            sampling: Sampling {
                temperature: 0.7,
                seed: 1,
            },
        };
        assert!(matches!(req.validate(), Err(Error::Precondition(_))));
        req.crop = Some(b(10., 10., 100., 50.));
        req.validate().unwrap();
        req.prompt = "  ".into();
        assert!(req.validate().is_err());

        let det = DetectRequest {
            image,
            crop: b(0., 0., 10., 10.),
            query: "".into(),
            box_threshold: 0.35,
        };
        assert!(matches!(det.validate(), Err(Error::Precondition(_))));
    }

    #[test]
    fn embedding_vector_checks() {
        assert!(matches!(
            EmbeddingVector::new(vec![0.0, 0.0], "m"),
            Err(Error::ZeroNorm)
        ));
        assert!(EmbeddingVector::new(vec![f64::NAN, 1.0], "m").is_err());
        assert_eq!(EmbeddingVector::new(vec![3.0, 4.0], "m").unwrap().norm(), 5.0);
    }

    proptest! {
        #[test]
        fn translation_round_trips(cx in 0.0..500.0f64, cy in 0.0..500.0f64, cw in 20.0..300.0f64, ch in 20.0..300.0f64,
                                   fx in 0.0..0.9f64, fy in 0.0..0.9f64, fw in 0.05..1.0f64, fh in 0.05..1.0f64) {
            let crop = b(cx, cy, cx + cw, cy + ch);
            let x1 = fx * cw;
            let y1 = fy * ch;
            let local = b(x1, y1, (x1 + fw * cw).min(cw), (y1 + fh * ch).min(ch));
            let full = crop_to_full(&local, &crop).unwrap();
            prop_assert!(crop.contains(&full));
            let back = full_to_crop(&full, &crop).unwrap();
            for (u, v) in back.coords().iter().zip(local.coords()) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }
}
