//! Detection and group-matching evaluation.
//!
//! Per-class metrics are AP at an IoU threshold (all-point interpolation) and
//! the log-average miss rate over nine FPPI reference points evenly spaced in
//! log space on `[1e-2, 1e0]`. The matching metrics count a group as a true
//! positive only when its base and every annotated extra are true positives
//! against the *same* ground-truth group, so every matching true positive is
//! also a true positive of each per-class evaluation. That makes
//! `AP_match <= AP_class` and `MR_match >= MR_class` hold by construction.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::group::{ClassId, GroupDetection, GroupLabel, ImageId};
use crate::io::GroupDataset;

/// Number of FPPI reference points for the log-average miss rate.
pub const MR_REFERENCE_POINTS: usize = 9;
/// Smallest miss rate entering the geometric mean.
pub const MISS_RATE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchVerdict {
    pub det_index: usize,
    pub is_tp: bool,
    pub matched_gt: Option<usize>,
}

/// Descending score, ties by index.
fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy single-image, single-class labeling.
///
/// Detections are visited by descending score; each claims its best-IoU
/// unclaimed ground truth when that IoU exceeds `thr`. Verdicts are returned
/// in input order.
pub fn label_detections(dets: &[(f64, BBox)], gts: &[BBox], thr: f64) -> Vec<MatchVerdict> {
    let scores: Vec<f64> = dets.iter().map(|d| d.0).collect();
    let mut claimed = vec![false; gts.len()];
    let mut verdicts: Vec<MatchVerdict> = (0..dets.len())
        .map(|det_index| MatchVerdict {
            det_index,
            is_tp: false,
            matched_gt: None,
        })
        .collect();
    for i in rank_by_score(&scores) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] {
                continue;
            }
            let v = iou(&dets[i].1, gt);
            if v > thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            claimed[g] = true;
            verdicts[i].is_tp = true;
            verdicts[i].matched_gt = Some(g);
        }
    }
    verdicts
}

/// Verdicts of one image: for the base boxes, every extra slot and the group
/// as a whole. All vectors are indexed by detection.
struct ImageLabels {
    base: Vec<MatchVerdict>,
    extras: Vec<Vec<Option<MatchVerdict>>>,
    groups: Vec<MatchVerdict>,
}

fn label_image(dets: &[&GroupDetection], gts: &[&GroupLabel], arity: usize, thr: f64) -> ImageLabels {
    let det_base: Vec<(f64, BBox)> = dets.iter().map(|d| (d.score, d.base)).collect();
    let gt_base: Vec<BBox> = gts.iter().map(|g| g.base).collect();
    let base = label_detections(&det_base, &gt_base, thr);

    let mut extras = vec![vec![None; arity]; dets.len()];
    for slot in 0..arity {
        let det_idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].extras[slot].is_some()).collect();
        let gt_idx: Vec<usize> = (0..gts.len()).filter(|&g| gts[g].extras[slot].is_some()).collect();
        let d: Vec<(f64, BBox)> = det_idx.iter().map(|&i| (dets[i].score, dets[i].extras[slot].unwrap())).collect();
        let g: Vec<BBox> = gt_idx.iter().map(|&g| gts[g].extras[slot].unwrap()).collect();
        for v in label_detections(&d, &g, thr) {
            let i = det_idx[v.det_index];
            extras[i][slot] = Some(MatchVerdict {
                det_index: i,
                is_tp: v.is_tp,
                matched_gt: v.matched_gt.map(|m| gt_idx[m]),
            });
        }
    }

    let groups = (0..dets.len())
        .map(|i| {
            let matched = base[i].matched_gt.filter(|&g| {
                (0..arity).all(|slot| {
                    gts[g].extras[slot].is_none() || extras[i][slot].and_then(|v| v.matched_gt) == Some(g)
                })
            });
            MatchVerdict {
                det_index: i,
                is_tp: matched.is_some(),
                matched_gt: matched,
            }
        })
        .collect();
    ImageLabels { base, extras, groups }
}

/// Group-level labeling for one image.
///
/// A detected group is a true positive for ground-truth group `g` when its
/// base box is credited to `g` by the greedy base labeling and, for every
/// extra annotated on `g`, the matching extra slot is credited to `g` as
/// well. Unannotated extras are not tested. Only same-class pairs match.
pub fn label_groups(dets: &[GroupDetection], gts: &[GroupLabel], thr: f64) -> Result<Vec<MatchVerdict>> {
    let arity = check_arity(dets, gts)?;
    let mut out = vec![
        MatchVerdict {
            det_index: 0,
            is_tp: false,
            matched_gt: None
        };
        dets.len()
    ];
    let classes: BTreeSet<ClassId> = dets.iter().map(|d| d.class_id).collect();
    for class in classes {
        let di: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == class).collect();
        let gi: Vec<usize> = (0..gts.len()).filter(|&g| gts[g].class_id == class).collect();
        let d: Vec<&GroupDetection> = di.iter().map(|&i| &dets[i]).collect();
        let g: Vec<&GroupLabel> = gi.iter().map(|&g| &gts[g]).collect();
        let labels = label_image(&d, &g, arity, thr);
        for v in labels.groups {
            out[di[v.det_index]] = MatchVerdict {
                det_index: di[v.det_index],
                is_tp: v.is_tp,
                matched_gt: v.matched_gt.map(|m| gi[m]),
            };
        }
    }
    Ok(out)
}

fn check_arity(dets: &[GroupDetection], gts: &[GroupLabel]) -> Result<usize> {
    let arity = gts
        .first()
        .map(|g| g.extras.len())
        .or_else(|| dets.first().map(|d| d.extras.len()))
        .unwrap_or(0);
    for (i, g) in gts.iter().enumerate() {
        if g.extras.len() != arity {
            return Err(Error::ArityMismatch {
                expected: arity,
                found: g.extras.len(),
                context: format!("ground-truth group {i}"),
            });
        }
    }
    for (i, d) in dets.iter().enumerate() {
        if d.extras.len() != arity {
            return Err(Error::ArityMismatch {
                expected: arity,
                found: d.extras.len(),
                context: format!("detection {i}"),
            });
        }
    }
    Ok(arity)
}

/// A detection's score and verdict, pooled across images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredVerdict {
    pub score: f64,
    pub is_tp: bool,
}

/// All-point interpolated AP and the raw `(recall, precision)` curve.
///
/// Records are ranked by descending score (stable for ties). Returns `None`
/// when there is no ground truth.
pub fn average_precision(records: &[ScoredVerdict], num_gt: usize) -> Option<(f64, Vec<(f64, f64)>)> {
    if num_gt == 0 {
        return None;
    }
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let mut curve = Vec::with_capacity(records.len());
    let mut tp = 0usize;
    for (rank, i) in rank_by_score(&scores).into_iter().enumerate() {
        tp += records[i].is_tp as usize;
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    recall.extend(curve.iter().map(|p| p.0));
    precision.extend(curve.iter().map(|p| p.1));
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let ap = (0..recall.len() - 1)
        .map(|i| (recall[i + 1] - recall[i]) * precision[i + 1])
        .sum();
    Some((ap, curve))
}

/// FPPI reference points, evenly spaced in log space over `[1e-2, 1e0]`.
pub fn fppi_reference_points() -> [f64; MR_REFERENCE_POINTS] {
    std::array::from_fn(|k| 10f64.powf(-2.0 + 2.0 * k as f64 / (MR_REFERENCE_POINTS - 1) as f64))
}

/// Log-average miss rate and the `(fppi, miss rate)` sweep.
///
/// The sweep starts at `(0, 1)` (no detections accepted) and adds one
/// detection at a time in rank order. At each reference FPPI the miss rate of
/// the last sweep state with `fppi <= ref` is used.
pub fn log_average_miss_rate(
    records: &[ScoredVerdict],
    num_gt: usize,
    num_images: usize,
) -> Option<(f64, Vec<(f64, f64)>)> {
    if num_gt == 0 || num_images == 0 {
        return None;
    }
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let mut curve = Vec::with_capacity(records.len() + 1);
    curve.push((0.0, 1.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    for i in rank_by_score(&scores) {
        if records[i].is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((fp as f64 / num_images as f64, 1.0 - tp as f64 / num_gt as f64));
    }
    let mut log_sum = 0.0;
    for r in fppi_reference_points() {
        // fppi is non-decreasing along the sweep.
        let last = curve.partition_point(|p| p.0 <= r) - 1;
        log_sum += curve[last].1.max(MISS_RATE_FLOOR).ln();
    }
    Some(((log_sum / MR_REFERENCE_POINTS as f64).exp(), curve))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "slot")]
pub enum Role {
    Base,
    Extra(usize),
    Match,
}

/// Metrics for one evaluated population (a class, an extra slot or the groups).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub class_id: ClassId,
    pub role: Role,
    pub num_gt: usize,
    pub num_dets: usize,
    pub ap: Option<f64>,
    pub mr: Option<f64>,
    pub pr_curve: Vec<(f64, f64)>,
    pub fppi_curve: Vec<(f64, f64)>,
}

impl ClassMetrics {
    fn compute(name: String, class_id: ClassId, role: Role, records: &[ScoredVerdict], num_gt: usize, num_images: usize) -> Self {
        let (ap, pr_curve) = match average_precision(records, num_gt) {
            Some((ap, c)) => (Some(ap), c),
            None => (None, Vec::new()),
        };
        let (mr, fppi_curve) = match log_average_miss_rate(records, num_gt, num_images) {
            Some((mr, c)) => (Some(mr), c),
            None => (None, Vec::new()),
        };
        ClassMetrics {
            name,
            class_id,
            role,
            num_gt,
            num_dets: records.len(),
            ap,
            mr,
            pr_curve,
            fppi_curve,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub iou_threshold: f64,
    pub num_images: usize,
    /// Base class and extra-slot metrics for every group class.
    pub per_class: Vec<ClassMetrics>,
    /// Group-matching metrics, one entry per group class.
    pub matching: Vec<ClassMetrics>,
}

impl EvalResult {
    pub fn get(&self, class_id: ClassId, role: Role) -> Option<&ClassMetrics> {
        match role {
            Role::Match => self.matching.iter().find(|m| m.class_id == class_id),
            _ => self.per_class.iter().find(|m| m.class_id == class_id && m.role == role),
        }
    }

    fn mean_over(&self, role: impl Fn(&ClassMetrics) -> bool, value: impl Fn(&ClassMetrics) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self.per_class.iter().chain(&self.matching).filter(|m| role(m)).filter_map(value).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean base-class AP across group classes.
    pub fn ap_base(&self) -> Option<f64> {
        self.mean_over(|m| m.role == Role::Base, |m| m.ap)
    }

    pub fn ap_extra(&self, slot: usize) -> Option<f64> {
        self.mean_over(|m| m.role == Role::Extra(slot), |m| m.ap)
    }

    pub fn ap_match(&self) -> Option<f64> {
        self.mean_over(|m| m.role == Role::Match, |m| m.ap)
    }

    pub fn mr_base(&self) -> Option<f64> {
        self.mean_over(|m| m.role == Role::Base, |m| m.mr)
    }

    pub fn mr_extra(&self, slot: usize) -> Option<f64> {
        self.mean_over(|m| m.role == Role::Extra(slot), |m| m.mr)
    }

    pub fn mr_match(&self) -> Option<f64> {
        self.mean_over(|m| m.role == Role::Match, |m| m.mr)
    }

    /// Checks `AP_match <= AP_c` and `MR_match >= MR_c` for the base class and
    /// every fully annotated extra slot of each group class.
    pub fn check_range_invariants(&self) -> Result<()> {
        const SLACK: f64 = 1e-12;
        for m in &self.matching {
            for c in self.per_class.iter().filter(|c| c.class_id == m.class_id) {
                if c.num_gt != m.num_gt {
                    continue;
                }
                if let (Some(am), Some(ac)) = (m.ap, c.ap) {
                    if am > ac + SLACK {
                        return Err(Error::Invariant(format!(
                            "AP_match {am} exceeds AP of {} ({ac})",
                            c.name
                        )));
                    }
                }
                if let (Some(mm), Some(mc)) = (m.mr, c.mr) {
                    if mm + SLACK < mc {
                        return Err(Error::Invariant(format!(
                            "MR_match {mm} is below MR of {} ({mc})",
                            c.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Content ordering used to break score ties independently of input order.
fn box_cmp(a: &BBox, b: &BBox) -> Ordering {
    a.to_array()
        .iter()
        .zip(b.to_array().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn extras_cmp(a: &[Option<BBox>], b: &[Option<BBox>]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = match (x, y) {
            (None, None) => Ordering::Equal,
            (None, Some(_)) => Ordering::Less,
            (Some(_), None) => Ordering::Greater,
            (Some(x), Some(y)) => box_cmp(x, y),
        };
        if o.is_ne() {
            return o;
        }
    }
    Ordering::Equal
}

fn detection_cmp(a: &GroupDetection, b: &GroupDetection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image_id.cmp(&b.image_id))
        .then(a.class_id.cmp(&b.class_id))
        .then_with(|| box_cmp(&a.base, &b.base))
        .then_with(|| extras_cmp(&a.extras, &b.extras))
}

fn label_cmp(a: &GroupLabel, b: &GroupLabel) -> Ordering {
    a.class_id
        .cmp(&b.class_id)
        .then_with(|| box_cmp(&a.base, &b.base))
        .then_with(|| extras_cmp(&a.extras, &b.extras))
        .then(a.group_id.cmp(&b.group_id))
}

/// Evaluates grouped detections against a ground-truth dataset.
///
/// Ground-truth groups flagged `ignore` are left out entirely. The image
/// count is the union of the dataset's image list and every image referenced
/// by a ground-truth group or a detection. The result is independent of the
/// order of `dets` and of the ground-truth records.
pub fn evaluate(gt: &GroupDataset, dets: &[GroupDetection], thr: f64) -> Result<EvalResult> {
    if !(0.0..1.0).contains(&thr) {
        return Err(Error::InvalidArgument(format!("IoU threshold must lie in [0, 1), got {thr}")));
    }
    let arity = gt.header.extra_class_names.len();
    let labels: Vec<&GroupLabel> = gt.groups.iter().filter(|g| !g.ignore).collect();
    for (i, g) in labels.iter().enumerate() {
        if g.extras.len() != arity {
            return Err(Error::ArityMismatch {
                expected: arity,
                found: g.extras.len(),
                context: format!("ground-truth group {} in image {} (record {i})", g.group_id, g.image_id),
            });
        }
    }
    for (i, d) in dets.iter().enumerate() {
        if d.extras.len() != arity {
            return Err(Error::ArityMismatch {
                expected: arity,
                found: d.extras.len(),
                context: format!("detection {i} in image {}", d.image_id),
            });
        }
    }

    let mut images: BTreeSet<ImageId> = gt.images.iter().copied().collect();
    images.extend(labels.iter().map(|g| g.image_id));
    images.extend(dets.iter().map(|d| d.image_id));
    let num_images = images.len();

    let mut ranked: Vec<&GroupDetection> = dets.iter().collect();
    ranked.sort_by(|a, b| detection_cmp(a, b));

    let classes: BTreeSet<ClassId> = labels
        .iter()
        .map(|g| g.class_id)
        .chain(ranked.iter().map(|d| d.class_id))
        .collect();

    let mut per_class = Vec::new();
    let mut matching = Vec::new();
    for class in classes {
        let mut gts_by_image: BTreeMap<ImageId, Vec<&GroupLabel>> = BTreeMap::new();
        for g in labels.iter().filter(|g| g.class_id == class) {
            gts_by_image.entry(g.image_id).or_default().push(g);
        }
        for v in gts_by_image.values_mut() {
            v.sort_by(|a, b| label_cmp(a, b));
        }
        let mut dets_by_image: BTreeMap<ImageId, Vec<usize>> = BTreeMap::new();
        for (rank, d) in ranked.iter().enumerate().filter(|(_, d)| d.class_id == class) {
            dets_by_image.entry(d.image_id).or_default().push(rank);
        }

        // Verdicts indexed by global rank.
        let mut base_v: BTreeMap<usize, bool> = BTreeMap::new();
        let mut slot_v: Vec<BTreeMap<usize, bool>> = vec![BTreeMap::new(); arity];
        let mut group_v: BTreeMap<usize, bool> = BTreeMap::new();
        for (image, ranks) in &dets_by_image {
            let image_dets: Vec<&GroupDetection> = ranks.iter().map(|&r| ranked[r]).collect();
            let empty = Vec::new();
            let image_gts = gts_by_image.get(image).unwrap_or(&empty);
            let l = label_image(&image_dets, image_gts, arity, thr);
            for (k, &r) in ranks.iter().enumerate() {
                base_v.insert(r, l.base[k].is_tp);
                group_v.insert(r, l.groups[k].is_tp);
                for slot in 0..arity {
                    if let Some(v) = l.extras[k][slot] {
                        slot_v[slot].insert(r, v.is_tp);
                    }
                }
            }
        }
        let records = |m: &BTreeMap<usize, bool>| -> Vec<ScoredVerdict> {
            m.iter()
                .map(|(&r, &is_tp)| ScoredVerdict {
                    score: ranked[r].score,
                    is_tp,
                })
                .collect()
        };

        let class_labels: Vec<&&GroupLabel> = labels.iter().filter(|g| g.class_id == class).collect();
        let base_name = gt
            .header
            .base_class_names
            .get(class as usize)
            .cloned()
            .unwrap_or_else(|| format!("class{class}"));
        per_class.push(ClassMetrics::compute(
            base_name.clone(),
            class,
            Role::Base,
            &records(&base_v),
            class_labels.len(),
            num_images,
        ));
        for slot in 0..arity {
            let num_gt = class_labels.iter().filter(|g| g.extras[slot].is_some()).count();
            let extra_name = &gt.header.extra_class_names[slot];
            let name = if gt.header.base_class_names.len() > 1 {
                format!("{base_name}/{extra_name}")
            } else {
                extra_name.clone()
            };
            per_class.push(ClassMetrics::compute(name, class, Role::Extra(slot), &records(&slot_v[slot]), num_gt, num_images));
        }
        matching.push(ClassMetrics::compute(
            format!("{base_name}/match"),
            class,
            Role::Match,
            &records(&group_v),
            class_labels.len(),
            num_images,
        ));
    }

    let result = EvalResult {
        iou_threshold: thr,
        num_images,
        per_class,
        matching,
    };
    result.check_range_invariants()?;
    Ok(result)
}
