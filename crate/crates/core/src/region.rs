//! Random multi-object query regions.
//!
//! A region starts from one uniformly chosen object and grows by repeatedly
//! absorbing the unselected object whose box center is nearest (Euclidean) to
//! the center of the current union hull. Once five or more objects are
//! involved, each addition is followed by a coin flip that stops the expansion
//! with probability `p_stop`; expansion also stops at `max_members` or when the
//! image runs out of objects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageId, ImageRecord, ObjectAnnotation};
use crate::error::{Error, Result};
use crate::geometry::{merge_boxes, BBox};
use crate::hashing::derive_seed;

/// Regions always involve more than four objects.
pub const MIN_MEMBERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionParams {
    pub p_stop: f64,
    pub max_members: usize,
    /// Pixels added around the member hull, clipped to the image.
    pub padding: f64,
}

impl Default for ExpansionParams {
    fn default() -> Self {
        Self {
            p_stop: 0.5,
            max_members: 10,
            padding: 0.0,
        }
    }
}

impl ExpansionParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_stop) {
            return Err(Error::InvalidParam {
                name: "p_stop",
                reason: format!("{} is not a probability", self.p_stop),
            });
        }
        if self.max_members < MIN_MEMBERS {
            return Err(Error::InvalidParam {
                name: "max_members",
                reason: format!("must be at least {MIN_MEMBERS}"),
            });
        }
        if !(self.padding >= 0.0 && self.padding.is_finite()) {
            return Err(Error::InvalidParam {
                name: "padding",
                reason: "must be finite and non-negative".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionQuery {
    pub image_id: ImageId,
    pub region_index: u32,
    pub uri: String,
    pub image_width: u32,
    pub image_height: u32,
    pub region_box: BBox,
    /// Members in the order they were absorbed.
    pub members: Vec<ObjectAnnotation>,
    pub seed: u64,
}

impl RegionQuery {
    pub fn member_boxes(&self) -> Vec<BBox> {
        self.members.iter().map(|m| m.bbox).collect()
    }
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

/// Grows one region over `record` using `rng`.
///
/// The recorded `seed` is informational; callers that want replayable output
/// should construct `rng` from it (see [`build_regions_for_dataset`]).
pub fn build_region<R: Rng + ?Sized>(
    record: &ImageRecord,
    rng: &mut R,
    params: &ExpansionParams,
    seed: u64,
    region_index: u32,
) -> Result<RegionQuery> {
    params.validate()?;
    let objects = &record.objects;
    if objects.len() < MIN_MEMBERS {
        return Err(Error::InsufficientObjects {
            image_id: record.image_id.0,
            found: objects.len(),
            required: MIN_MEMBERS,
        });
    }

    let mut selected = vec![false; objects.len()];
    let start = rng.random_range(0..objects.len());
    selected[start] = true;
    let mut members = vec![objects[start].clone()];
    let mut hull = objects[start].bbox;

    while members.len() < params.max_members && members.len() < objects.len() {
        let c = hull.center();
        let next = objects
            .iter()
            .enumerate()
            .filter(|(i, _)| !selected[*i])
            .min_by(|(_, a), (_, b)| {
                dist2(a.bbox.center(), c)
                    .total_cmp(&dist2(b.bbox.center(), c))
                    .then(a.object_id.cmp(&b.object_id))
            })
            .map(|(i, _)| i)
            .expect("loop guard ensures an unselected object remains");
        selected[next] = true;
        members.push(objects[next].clone());
        hull = merge_boxes(&[hull, objects[next].bbox])?;

        if members.len() >= MIN_MEMBERS && rng.random_bool(params.p_stop) {
            break;
        }
    }

    let region_box = if params.padding > 0.0 {
        hull.padded(params.padding, record.width as f64, record.height as f64)?
    } else {
        hull
    };

    Ok(RegionQuery {
        image_id: record.image_id,
        region_index,
        uri: record.uri.clone(),
        image_width: record.width,
        image_height: record.height,
        region_box,
        members,
        seed,
    })
}

/// Seed for one region, independent of every other region.
pub fn region_seed(global_seed: u64, image_id: ImageId, region_index: u32) -> u64 {
    derive_seed(global_seed, &[image_id.0, region_index as u64])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub images_seen: usize,
    pub images_skipped: usize,
    pub regions: usize,
}

/// Builds up to `regions_per_image` regions per eligible image.
///
/// Images with too few objects are skipped and counted. Every region gets its
/// own RNG stream derived from `(global_seed, image_id, region_index)`, so the
/// output does not depend on processing order.
pub fn build_regions_for_dataset(
    records: &[ImageRecord],
    global_seed: u64,
    params: &ExpansionParams,
    regions_per_image: u32,
) -> Result<(Vec<RegionQuery>, RegionSummary)> {
    if regions_per_image == 0 {
        return Err(Error::InvalidParam {
            name: "regions_per_image",
            reason: "must be at least 1".into(),
        });
    }
    params.validate()?;
    let mut summary = RegionSummary {
        images_seen: records.len(),
        ..Default::default()
    };
    let mut regions = Vec::new();
    for record in records {
        if record.objects.len() < MIN_MEMBERS {
            summary.images_skipped += 1;
            continue;
        }
        for idx in 0..regions_per_image {
            let seed = region_seed(global_seed, record.image_id, idx);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            regions.push(build_region(record, &mut rng, params, seed, idx)?);
        }
    }
    summary.regions = regions.len();
    Ok((regions, summary))
}
