//! COCO-style annotation loading.
//!
//! The loader reads the `images`, `annotations` and `categories` arrays of a
//! COCO/Objects365 document, converts `(x, y, w, h)` boxes into the canonical
//! `(x1, y1, x2, y2)` frame and validates every record. Annotations flagged with
//! `iscrowd = 1` are excluded.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Boxes may overshoot the image border by at most this many pixels before being rejected.
pub const CLAMP_TOLERANCE_PX: f64 = 1.0;
pub const DEFAULT_MIN_OBJECTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub u64);

impl std::fmt::Display for ImageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::fmt::Display for ObjectId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub object_id: ObjectId,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub uri: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<ObjectAnnotation>,
}

impl ImageRecord {
    pub fn full_box(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width as f64, self.height as f64).expect("validated image dimensions are positive")
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Schema {
                field: format!("images[{}].width/height", self.image_id),
                message: "image dimensions must be positive".into(),
            });
        }
        for obj in &self.objects {
            if obj.category.is_empty() {
                return Err(Error::Schema {
                    field: format!("annotations[{}].category", obj.object_id),
                    message: "category must be nonempty".into(),
                });
            }
            if !obj.bbox.within(self.width as f64, self.height as f64) {
                return Err(Error::OutOfBounds {
                    image_id: self.image_id.0,
                    object_id: obj.object_id.0,
                });
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct CocoDocument {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
    #[serde(default)]
    coco_url: Option<String>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Clamps a raw `(x1, y1, x2, y2)` to the image when it overshoots by at most
/// [`CLAMP_TOLERANCE_PX`]; returns `None` when it overshoots further.
fn clamp_to_image(c: [f64; 4], width: f64, height: f64) -> Option<[f64; 4]> {
    let tol = CLAMP_TOLERANCE_PX;
    let [x1, y1, x2, y2] = c;
    if x1 < -tol || y1 < -tol || x2 > width + tol || y2 > height + tol {
        return None;
    }
    Some([x1.max(0.0), y1.max(0.0), x2.min(width), y2.min(height)])
}

/// Parses a COCO-style JSON document held in memory.
///
/// `image_root`, when given, is prefixed to each `file_name` to form the URI.
pub fn parse_annotations(json: &str, image_root: Option<&str>) -> Result<Vec<ImageRecord>> {
    let doc: CocoDocument = serde_json::from_str(json).map_err(|e| {
        if e.is_data() {
            Error::Schema {
                field: format!("line {}, column {}", e.line(), e.column()),
                message: e.to_string(),
            }
        } else {
            Error::Parse {
                what: "annotation file".into(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            }
        }
    })?;

    let categories: BTreeMap<u64, String> = doc.categories.into_iter().map(|c| (c.id, c.name)).collect();

    let mut order = Vec::with_capacity(doc.images.len());
    let mut records: BTreeMap<u64, ImageRecord> = BTreeMap::new();
    for img in doc.images {
        let uri = match (&img.coco_url, image_root) {
            (_, Some(root)) => format!("{}/{}", root.trim_end_matches('/'), img.file_name),
            (Some(url), None) => url.clone(),
            (None, None) => img.file_name.clone(),
        };
        if records.contains_key(&img.id) {
            return Err(Error::Schema {
                field: "images[].id".into(),
                message: format!("duplicate image id {}", img.id),
            });
        }
        order.push(img.id);
        records.insert(
            img.id,
            ImageRecord {
                image_id: ImageId(img.id),
                uri,
                width: img.width,
                height: img.height,
                objects: Vec::new(),
            },
        );
    }

    for ann in doc.annotations {
        if ann.iscrowd != 0 {
            continue;
        }
        let record = records.get_mut(&ann.image_id).ok_or_else(|| Error::Schema {
            field: format!("annotations[{}].image_id", ann.id),
            message: format!("unknown image id {}", ann.image_id),
        })?;
        let category = categories
            .get(&ann.category_id)
            .ok_or_else(|| Error::Schema {
                field: format!("annotations[{}].category_id", ann.id),
                message: format!("unknown category id {}", ann.category_id),
            })?
            .clone();
        let [x, y, w, h] = ann.bbox;
        let raw = [x, y, x + w, y + h];
        let clamped = clamp_to_image(raw, record.width as f64, record.height as f64).ok_or(Error::OutOfBounds {
            image_id: ann.image_id,
            object_id: ann.id,
        })?;
        let bbox = BBox::try_from(clamped).map_err(|e| Error::Schema {
            field: format!("annotations[{}].bbox", ann.id),
            message: e.to_string(),
        })?;
        record.objects.push(ObjectAnnotation {
            object_id: ObjectId(ann.id),
            category,
            bbox,
        });
    }

    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut rec = records.remove(&id).expect("inserted above");
        rec.objects.sort_by_key(|o| o.object_id);
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_annotations(path: &Path, image_root: Option<&str>) -> Result<Vec<ImageRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, image_root)
}

/// Records with at least `min_objects` objects, input order preserved.
pub fn filter_images(records: &[ImageRecord], min_objects: usize) -> Vec<ImageRecord> {
    records
        .iter()
        .filter(|r| r.objects.len() >= min_objects)
        .cloned()
        .collect()
}

/// Writes one JSON value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            what: path.display().to_string(),
            line: idx + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}
