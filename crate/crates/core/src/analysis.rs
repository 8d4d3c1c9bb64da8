//! Dataset analyses explaining when grouped prediction helps: how much a
//! group's boxes overlap, and which feature-map stride each box would be
//! assigned to by a regular detector using center sampling and scale matching.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::group::{GroupLabel, ImageId};

/// Feature-map strides with the object-size range each one is responsible for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrideSpec {
    pub strides: Vec<u32>,
    /// `[lo, hi)` ranges of `sqrt(w * h)`, aligned with `strides`.
    pub size_ranges: Vec<(f64, f64)>,
    /// Half-width of the center-sampling square, in units of the stride.
    pub center_radius: f64,
}

impl Default for StrideSpec {
    fn default() -> Self {
        StrideSpec {
            strides: vec![8, 16, 32],
            size_ranges: vec![(0.0, 64.0), (64.0, 128.0), (128.0, f64::INFINITY)],
            center_radius: 1.5,
        }
    }
}

impl StrideSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("stride spec: {m}")));
        if self.strides.is_empty() || self.strides.len() != self.size_ranges.len() {
            return bad("strides and size ranges must be non-empty and of equal length");
        }
        if self.strides.windows(2).any(|w| w[0] >= w[1]) || self.strides[0] == 0 {
            return bad("strides must be positive and strictly increasing");
        }
        if self.size_ranges[0].0 != 0.0 || self.size_ranges.last().unwrap().1 != f64::INFINITY {
            return bad("size ranges must start at 0 and end at infinity");
        }
        if self.size_ranges.windows(2).any(|w| w[0].1 != w[1].0) || self.size_ranges.iter().any(|r| !(r.0 < r.1)) {
            return bad("size ranges must be contiguous and non-empty");
        }
        if !(self.center_radius > 0.0) {
            return bad("center radius must be positive");
        }
        Ok(())
    }

    /// Index of the level whose size range contains `sqrt(w * h)`.
    pub fn level_for(&self, b: &BBox) -> usize {
        let s = b.scale();
        self.size_ranges
            .iter()
            .position(|&(lo, hi)| s >= lo && s < hi)
            .unwrap_or(self.size_ranges.len() - 1)
    }

    /// Grid cells of `stride` whose centers lie inside `b` and within the
    /// center-sampling square around its center.
    pub fn matched_cells(&self, b: &BBox, stride: u32, image: (f64, f64)) -> u64 {
        let s = stride as f64;
        let r = self.center_radius * s;
        let (cx, cy) = b.center();
        let count_axis = |lo: f64, hi: f64, extent: f64| -> u64 {
            // cell i has center (i + 0.5) * s, for 0 <= i < ceil(extent / s)
            let cells = (extent / s).ceil() as i64;
            if hi < lo || cells <= 0 {
                return 0;
            }
            let first = ((lo / s) - 0.5).ceil().max(0.0) as i64;
            let last = (((hi / s) - 0.5).floor() as i64).min(cells - 1);
            (last - first + 1).max(0) as u64
        };
        count_axis(b.x().max(cx - r), b.right().min(cx + r), image.0)
            * count_axis(b.y().max(cy - r), b.bottom().min(cy + r), image.1)
    }
}

/// Which proposals the related boxes compete for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentView {
    /// Every box is an independent object (regular detector).
    #[default]
    Independent,
    /// Extras share the base box's proposals (grouped prediction).
    BaseDriven,
}

/// Mean matched proposals per image for one stride and role; role 0 is the
/// base class and role `i + 1` is extra slot `i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrideCount {
    pub stride: u32,
    pub role: usize,
    pub mean_matched: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentReport {
    /// Sorted by stride, then role.
    pub per_stride_counts: Vec<StrideCount>,
    /// Fraction of annotated (base, extra) pairs assigned to the same stride.
    pub same_stride_fraction: f64,
    pub num_images: usize,
    pub num_pairs: usize,
}

impl AssignmentReport {
    pub fn count(&self, stride: u32, role: usize) -> f64 {
        self.per_stride_counts
            .iter()
            .find(|c| c.stride == stride && c.role == role)
            .map_or(0.0, |c| c.mean_matched)
    }
}

/// Assigns every ground-truth box to a stride and counts matched proposals.
///
/// Boxes are clipped to the image; boxes entirely outside it are skipped.
/// `images` lists the image ids to average over, in addition to those present
/// in `gts`.
pub fn assign_to_strides(
    gts: &[GroupLabel],
    images: &[ImageId],
    image_size: (f64, f64),
    spec: &StrideSpec,
    view: AssignmentView,
) -> Result<AssignmentReport> {
    spec.validate()?;
    if !(image_size.0 > 0.0 && image_size.1 > 0.0) {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    let frame = BBox::new(0.0, 0.0, image_size.0, image_size.1)?;
    let mut image_set: BTreeSet<ImageId> = images.iter().copied().collect();
    image_set.extend(gts.iter().map(|g| g.image_id));

    let mut totals: BTreeMap<(u32, usize), u64> = BTreeMap::new();
    for &stride in &spec.strides {
        for role in 0..=gts.first().map_or(0, |g| g.extras.len()) {
            totals.insert((stride, role), 0);
        }
    }
    let (mut pairs, mut same) = (0usize, 0usize);
    for g in gts {
        let Some(base) = g.base.clip_to(&frame) else { continue };
        let base_level = spec.level_for(&base);
        let base_stride = spec.strides[base_level];
        let base_cells = spec.matched_cells(&base, base_stride, image_size);
        *totals.entry((base_stride, 0)).or_default() += base_cells;
        for (slot, extra) in g.extras.iter().enumerate() {
            let Some(extra) = extra.and_then(|e| e.clip_to(&frame)) else { continue };
            let (level, cells) = match view {
                AssignmentView::Independent => {
                    let level = spec.level_for(&extra);
                    (level, spec.matched_cells(&extra, spec.strides[level], image_size))
                }
                AssignmentView::BaseDriven => (base_level, base_cells),
            };
            *totals.entry((spec.strides[level], slot + 1)).or_default() += cells;
            pairs += 1;
            same += (level == base_level) as usize;
        }
    }
    let n = image_set.len().max(1) as f64;
    Ok(AssignmentReport {
        per_stride_counts: totals
            .into_iter()
            .map(|((stride, role), v)| StrideCount {
                stride,
                role,
                mean_matched: v as f64 / n,
            })
            .collect(),
        same_stride_fraction: if pairs == 0 { 0.0 } else { same as f64 / pairs as f64 },
        num_images: image_set.len(),
        num_pairs: pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapHistogram {
    /// `(lo, hi, density)` per bin over `[0, 1]`.
    pub bins: Vec<(f64, f64, f64)>,
    pub mean: f64,
    pub count: usize,
}

/// Density of IoU between each group's base box and its annotated extras.
pub fn overlap_histogram(gts: &[GroupLabel], bins: usize) -> Result<OverlapHistogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let values: Vec<f64> = gts
        .iter()
        .flat_map(|g| g.extras.iter().flatten().map(move |e| iou(&g.base, e)))
        .collect();
    if values.is_empty() {
        return Err(Error::InvalidArgument("no annotated (base, extra) pairs".into()));
    }
    let mut counts = vec![0usize; bins];
    for &v in &values {
        let k = ((v * bins as f64) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let width = 1.0 / bins as f64;
    let total = values.len() as f64;
    Ok(OverlapHistogram {
        bins: counts
            .iter()
            .enumerate()
            .map(|(k, &c)| (k as f64 * width, (k + 1) as f64 * width, c as f64 / (total * width)))
            .collect(),
        mean: values.iter().sum::<f64>() / total,
        count: values.len(),
    })
}
