//! Grouped boxes: one base box plus `N` positional extras sharing a class and a score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{apply_offsets, BBox, Offset};

pub type ImageId = u64;
pub type ClassId = u32;

/// A predicted group. A `None` extra marks a group whose related box is
/// missing (e.g. a base detection left unpaired by post-hoc matching).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDetection {
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub score: f64,
    pub base: BBox,
    pub extras: Vec<Option<BBox>>,
}

impl GroupDetection {
    pub fn new(
        image_id: ImageId,
        class_id: ClassId,
        score: f64,
        base: BBox,
        extras: Vec<BBox>,
    ) -> Result<Self> {
        check_score(score)?;
        Ok(GroupDetection {
            image_id,
            class_id,
            score,
            base,
            extras: extras.into_iter().map(Some).collect(),
        })
    }

    /// Builds a group from a base box and per-extra offsets.
    pub fn from_offsets(
        image_id: ImageId,
        class_id: ClassId,
        score: f64,
        base: BBox,
        offsets: &[Offset],
    ) -> Result<Self> {
        let extras = apply_offsets(&base, offsets)?;
        Self::new(image_id, class_id, score, base, extras)
    }

    pub fn arity(&self) -> usize {
        self.extras.len()
    }
}

/// An annotated group. `None` extras are unannotated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLabel {
    pub image_id: ImageId,
    pub group_id: u64,
    pub class_id: ClassId,
    pub base: BBox,
    pub extras: Vec<Option<BBox>>,
    #[serde(default)]
    pub ignore: bool,
    /// Fields not part of the schema, kept when loading leniently.
    #[serde(flatten, default, skip_serializing_if = "BTreeMap::is_empty")]
    pub unknown_fields: BTreeMap<String, Value>,
}

impl GroupLabel {
    pub fn new(image_id: ImageId, group_id: u64, class_id: ClassId, base: BBox, extras: Vec<Option<BBox>>) -> Self {
        GroupLabel {
            image_id,
            group_id,
            class_id,
            base,
            extras,
            ignore: false,
            unknown_fields: BTreeMap::new(),
        }
    }

    pub fn is_fully_annotated(&self) -> bool {
        self.extras.iter().all(Option::is_some)
    }
}

/// A single-class detection, as produced by an independent per-class detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub score: f64,
    pub bbox: BBox,
}

impl Detection {
    pub fn new(image_id: ImageId, class_id: ClassId, score: f64, bbox: BBox) -> Result<Self> {
        check_score(score)?;
        Ok(Detection {
            image_id,
            class_id,
            score,
            bbox,
        })
    }
}

pub(crate) fn check_score(score: f64) -> Result<()> {
    if (0.0..=1.0).contains(&score) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("score {score} outside [0, 1]")))
    }
}

/// Ensures every group has the same number of extras and returns it.
pub fn common_arity<'a, I>(extras: I) -> Result<usize>
where
    I: IntoIterator<Item = &'a [Option<BBox>]>,
{
    let mut arity = None;
    for (i, e) in extras.into_iter().enumerate() {
        match arity {
            None => arity = Some(e.len()),
            Some(n) if n != e.len() => {
                return Err(Error::ArityMismatch {
                    expected: n,
                    found: e.len(),
                    context: format!("group {i}"),
                })
            }
            _ => {}
        }
    }
    Ok(arity.unwrap_or(0))
}
