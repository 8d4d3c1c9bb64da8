//! Greedy non-maximum suppression for single boxes and for box groups.
//!
//! Group modes compare the kept group and a candidate elementwise (base with
//! base, extra `i` with extra `i`) and aggregate the resulting IoU set:
//!
//! * [`SuppressionMode::Set`] suppresses when the *minimum* IoU exceeds the
//!   threshold, i.e. only when every box of the group is a duplicate.
//! * [`SuppressionMode::Joint`] suppresses when the *maximum* IoU exceeds it.
//! * [`SuppressionMode::BaseOnly`] looks at the base boxes alone.
//!
//! Candidates are only ever suppressed by a kept group of the same class and
//! the same image. Equal scores are ordered by input index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::group::{common_arity, ClassId, GroupDetection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SuppressionMode {
    /// Classical NMS on every box, independently per class.
    #[value(name = "per-class")]
    PerClass,
    /// Group NMS driven by the base boxes only.
    #[value(name = "base")]
    BaseOnly,
    /// Group NMS suppressing when any box overlaps.
    Joint,
    /// Group NMS suppressing only when all boxes overlap.
    Set,
}

impl SuppressionMode {
    pub const GROUP_MODES: [SuppressionMode; 3] =
        [SuppressionMode::BaseOnly, SuppressionMode::Joint, SuppressionMode::Set];

    pub fn name(self) -> &'static str {
        match self {
            SuppressionMode::PerClass => "per-class",
            SuppressionMode::BaseOnly => "base",
            SuppressionMode::Joint => "joint",
            SuppressionMode::Set => "set",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuppressionParams {
    pub iou_threshold: f64,
    pub mode: SuppressionMode,
}

impl SuppressionParams {
    pub fn new(iou_threshold: f64, mode: SuppressionMode) -> Result<Self> {
        check_threshold(iou_threshold)?;
        Ok(SuppressionParams { iou_threshold, mode })
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "IoU threshold must lie strictly inside (0, 1), got {t}"
        )))
    }
}

/// Indices sorted by descending score; ties keep input order.
fn greedy_order(scores: impl Iterator<Item = f64>) -> Result<Vec<usize>> {
    let scores: Vec<f64> = scores.collect();
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score at index {i}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order)
}

/// Classical greedy NMS per class on a single image.
///
/// Returns indices of kept detections in greedy (descending score) order.
pub fn per_class_nms(dets: &[(ClassId, f64, BBox)], iou_threshold: f64) -> Result<Vec<usize>> {
    check_threshold(iou_threshold)?;
    let order = greedy_order(dets.iter().map(|d| d.1))?;
    let mut removed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if removed[i] {
            continue;
        }
        kept.push(i);
        let (class, _, ref bx) = dets[i];
        for &j in &order[pos + 1..] {
            if !removed[j] && dets[j].0 == class && iou(bx, &dets[j].2) > iou_threshold {
                removed[j] = true;
            }
        }
    }
    Ok(kept)
}

/// Elementwise IoU set between two groups (base first). A missing extra on
/// either side contributes an IoU of 0.
pub fn iou_set(a: &GroupDetection, b: &GroupDetection) -> Vec<f64> {
    std::iter::once(iou(&a.base, &b.base))
        .chain(a.extras.iter().zip(&b.extras).map(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => iou(x, y),
            _ => 0.0,
        }))
        .collect()
}

fn overlaps(kept: &GroupDetection, other: &GroupDetection, params: &SuppressionParams) -> bool {
    let t = params.iou_threshold;
    match params.mode {
        SuppressionMode::BaseOnly => iou(&kept.base, &other.base) > t,
        SuppressionMode::Joint => iou_set(kept, other).into_iter().any(|v| v > t),
        SuppressionMode::Set => iou_set(kept, other).into_iter().all(|v| v > t),
        SuppressionMode::PerClass => unreachable!("per-class mode is not a group mode"),
    }
}

/// Greedy group suppression (base-only, joint or set NMS).
///
/// Returns indices of kept groups in descending score order. Groups from
/// different images or classes never suppress each other.
pub fn group_suppress(groups: &[GroupDetection], params: &SuppressionParams) -> Result<Vec<usize>> {
    check_threshold(params.iou_threshold)?;
    if params.mode == SuppressionMode::PerClass {
        return Err(Error::InvalidArgument(
            "per-class mode operates on individual boxes; use per_class_nms".into(),
        ));
    }
    common_arity(groups.iter().map(|g| g.extras.as_slice()))?;
    let order = greedy_order(groups.iter().map(|g| g.score))?;
    let mut removed = vec![false; groups.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if removed[i] {
            continue;
        }
        kept.push(i);
        let top = &groups[i];
        for &j in &order[pos + 1..] {
            let cand = &groups[j];
            if removed[j] || cand.class_id != top.class_id || cand.image_id != top.image_id {
                continue;
            }
            if overlaps(top, cand, params) {
                removed[j] = true;
            }
        }
    }
    Ok(kept)
}

/// Applies `mode` to grouped detections and returns the surviving groups.
///
/// [`SuppressionMode::PerClass`] runs classical NMS separately on the base
/// boxes and on every extra slot (each treated as its own class) and keeps a
/// group when its base survives; suppressed extras are dropped from it.
pub fn suppress(groups: &[GroupDetection], params: &SuppressionParams) -> Result<Vec<GroupDetection>> {
    if params.mode != SuppressionMode::PerClass {
        let kept = group_suppress(groups, params)?;
        return Ok(kept.into_iter().map(|i| groups[i].clone()).collect());
    }
    let arity = common_arity(groups.iter().map(|g| g.extras.as_slice()))?;
    let mut out: Vec<GroupDetection> = Vec::new();
    for image in distinct_images(groups) {
        let idx: Vec<usize> = (0..groups.len()).filter(|&i| groups[i].image_id == image).collect();
        let bases: Vec<_> = idx
            .iter()
            .map(|&i| (groups[i].class_id, groups[i].score, groups[i].base))
            .collect();
        let kept_base = per_class_nms(&bases, params.iou_threshold)?;
        let mut extra_alive = vec![vec![false; arity]; idx.len()];
        for slot in 0..arity {
            let members: Vec<usize> = (0..idx.len()).filter(|&k| groups[idx[k]].extras[slot].is_some()).collect();
            let boxes: Vec<_> = members
                .iter()
                .map(|&k| {
                    let g = &groups[idx[k]];
                    (g.class_id, g.score, g.extras[slot].unwrap())
                })
                .collect();
            for m in per_class_nms(&boxes, params.iou_threshold)? {
                extra_alive[members[m]][slot] = true;
            }
        }
        for k in kept_base {
            let mut g = groups[idx[k]].clone();
            for (slot, e) in g.extras.iter_mut().enumerate() {
                if !extra_alive[k][slot] {
                    *e = None;
                }
            }
            out.push(g);
        }
    }
    let order = greedy_order(out.iter().map(|g| g.score))?;
    Ok(order.into_iter().map(|i| out[i].clone()).collect())
}

fn distinct_images(groups: &[GroupDetection]) -> Vec<u64> {
    let mut ids: Vec<u64> = groups.iter().map(|g| g.image_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}
