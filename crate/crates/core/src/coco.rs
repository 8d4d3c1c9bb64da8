//! Person + torso groups from COCO person-keypoint annotations.
//!
//! Torso boxes are approximated from the shoulder and hip keypoints: the
//! bounding rectangle of the labeled torso keypoints, padded by `margin`
//! times its own width/height on every side and clipped to the person box.
//! Persons with no labeled torso keypoint are dropped; persons with a single
//! one are kept with an unannotated torso.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::group::GroupLabel;
use crate::io::{DatasetHeader, GroupDataset};

/// COCO keypoint indices of left/right shoulder and left/right hip.
pub const TORSO_KEYPOINTS: [usize; 4] = [5, 6, 11, 12];
pub const DEFAULT_TORSO_MARGIN: f64 = 0.1;

#[derive(Debug, Deserialize)]
struct CocoDocument {
    #[serde(default)]
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: u64,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    keypoints: Option<Vec<f64>>,
    #[serde(default)]
    iscrowd: u8,
}

/// Torso box for one person, or `None` when fewer than two torso keypoints are labeled.
///
/// A keypoint counts as labeled when its visibility flag is positive.
pub fn torso_from_keypoints(keypoints: &[f64], person: &BBox, margin: f64) -> Option<BBox> {
    let pts: Vec<(f64, f64)> = TORSO_KEYPOINTS
        .iter()
        .filter_map(|&k| {
            let v = keypoints.get(3 * k + 2).copied().unwrap_or(0.0);
            (v > 0.0).then(|| (keypoints[3 * k], keypoints[3 * k + 1]))
        })
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let (mut x1, mut y1, mut x2, mut y2) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x1 = x1.min(x);
        y1 = y1.min(y);
        x2 = x2.max(x);
        y2 = y2.max(y);
    }
    let (pw, ph) = (margin * (x2 - x1), margin * (y2 - y1));
    let padded = BBox::from_corners(x1 - pw, y1 - ph, x2 + pw, y2 + ph).ok()?;
    padded.clip_to(person)
}

fn labeled_torso_count(keypoints: &[f64]) -> usize {
    TORSO_KEYPOINTS
        .iter()
        .filter(|&&k| keypoints.get(3 * k + 2).copied().unwrap_or(0.0) > 0.0)
        .count()
}

/// Converts a parsed COCO document into a person/torso groups dataset.
pub fn convert_coco_value(doc: serde_json::Value, margin: f64) -> Result<GroupDataset> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::InvalidArgument(format!("margin must be a non-negative number, got {margin}")));
    }
    let doc: CocoDocument = serde_json::from_value(doc).map_err(|e| Error::validation("coco document", e.to_string()))?;
    let person = doc
        .categories
        .iter()
        .find(|c| c.name == "person")
        .ok_or_else(|| Error::validation("categories", "no `person` category"))?
        .id;

    let mut groups = Vec::new();
    for (i, ann) in doc.annotations.iter().enumerate() {
        let location = format!("annotations[{i}] (id {})", ann.id);
        if !doc.categories.iter().any(|c| c.id == ann.category_id) {
            return Err(Error::validation(location, format!("unknown category_id {}", ann.category_id)));
        }
        if ann.category_id != person {
            continue;
        }
        let keypoints = ann
            .keypoints
            .as_ref()
            .ok_or_else(|| Error::validation(&location, "missing keypoints array"))?;
        if keypoints.len() < 3 * 17 || keypoints.len() % 3 != 0 {
            return Err(Error::validation(&location, format!("expected 17 keypoint triples, found {} values", keypoints.len())));
        }
        let base = BBox::try_from(ann.bbox).map_err(|e| Error::validation(&location, e.to_string()))?;
        if labeled_torso_count(keypoints) == 0 {
            continue;
        }
        let torso = torso_from_keypoints(keypoints, &base, margin);
        let mut g = GroupLabel::new(ann.image_id, ann.id, 0, base, vec![torso]);
        g.ignore = ann.iscrowd != 0;
        groups.push(g);
    }
    groups.sort_by_key(|g| (g.image_id, g.group_id));
    let mut images: Vec<u64> = doc.images.iter().map(|im| im.id).collect();
    images.sort_unstable();
    images.dedup();

    let ds = GroupDataset {
        header: DatasetHeader::new(vec!["person".into()], vec!["torso".into()]),
        images,
        groups,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn convert_coco_torso(path: impl AsRef<Path>, margin: f64) -> Result<GroupDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc = serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    convert_coco_value(doc, margin)
}
