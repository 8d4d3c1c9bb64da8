//! Training objective for grouped predictions with analytic gradients.
//!
//! The total loss for one group is focal classification loss, plus DIoU
//! localization for the base box and every annotated extra, plus a coverage
//! constraint pushing each extra box to enclose the base box. Gradients are
//! taken with respect to raw `(x, y, w, h)` box parameters (and the
//! pre-sigmoid logit for the focal term) so they can be checked against
//! central finite differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_offsets, diou_terms, BBox, Offset};
use crate::group::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_delta: f64,
    pub constraint_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_delta: 1.0,
            constraint_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::InvalidArgument("focal_gamma must be >= 0".into()));
        }
        if !(self.smooth_l1_delta > 0.0) {
            return Err(Error::InvalidArgument("smooth_l1_delta must be > 0".into()));
        }
        if !(self.constraint_weight >= 0.0) {
            return Err(Error::InvalidArgument("constraint_weight must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::InvalidArgument("focal_alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Regression target for one group; `None` extras carry no localization loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTarget {
    pub base: BBox,
    pub extras: Vec<Option<BBox>>,
    pub class_id: ClassId,
}

/// Focal loss of probability `p` for binary label `positive`, with the
/// derivative taken with respect to the logit `z` where `p = sigmoid(z)`.
pub fn focal_loss(p: f64, positive: bool, cfg: &LossConfig) -> Result<(f64, f64)> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "focal loss needs p strictly inside (0, 1), got {p}"
        )));
    }
    let (a, g) = (cfg.focal_alpha, cfg.focal_gamma);
    if positive {
        let q = 1.0 - p;
        let loss = -a * q.powf(g) * p.ln();
        let grad = a * (g * q.powf(g) * p * p.ln() - q.powf(g + 1.0));
        Ok((loss, grad))
    } else {
        let q = 1.0 - p;
        let loss = -(1.0 - a) * p.powf(g) * q.ln();
        let grad = (1.0 - a) * (p.powf(g + 1.0) - g * p.powf(g) * q * q.ln());
        Ok((loss, grad))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `1 - IoU + |c - c_gt|^2 / d^2` and its gradient over `pred`'s `(x, y, w, h)`.
///
/// At configurations where an edge of `pred` coincides with an edge of `gt`
/// the one-sided derivative from the "pred edge strictly inside" side is used.
pub fn diou_loss(pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
    if !(gt.area() > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "DIoU target must have positive area, got {gt:?}"
        )));
    }
    let (overlap, penalty) = diou_terms(pred, gt);
    let loss = 1.0 - overlap + penalty;

    let (x1, y1, x2, y2) = (pred.x(), pred.y(), pred.right(), pred.bottom());
    let (gx1, gy1, gx2, gy2) = (gt.x(), gt.y(), gt.right(), gt.bottom());

    // Corner-space partials, ordered [x1, y1, x2, y2].
    let iw = (x2.min(gx2) - x1.max(gx1)).max(0.0);
    let ih = (y2.min(gy2) - y1.max(gy1)).max(0.0);
    let inter = iw * ih;
    let union = pred.area() + gt.area() - inter;
    let mut d_inter = [0.0; 4];
    if iw > 0.0 && ih > 0.0 {
        d_inter[0] = if x1 > gx1 { -ih } else { 0.0 };
        d_inter[2] = if x2 < gx2 { ih } else { 0.0 };
        d_inter[1] = if y1 > gy1 { -iw } else { 0.0 };
        d_inter[3] = if y2 < gy2 { iw } else { 0.0 };
    }
    let (pw, ph) = (pred.w(), pred.h());
    let d_area = [-ph, -pw, ph, pw];
    let mut d_iou = [0.0; 4];
    if union > 0.0 {
        for k in 0..4 {
            let d_union = d_area[k] - d_inter[k];
            d_iou[k] = (d_inter[k] * union - inter * d_union) / (union * union);
        }
    }

    let (cx, cy) = pred.center();
    let (gcx, gcy) = gt.center();
    let rho2 = (cx - gcx).powi(2) + (cy - gcy).powi(2);
    let d_rho2 = [cx - gcx, cy - gcy, cx - gcx, cy - gcy];
    let ew = x2.max(gx2) - x1.min(gx1);
    let eh = y2.max(gy2) - y1.min(gy1);
    let d2 = ew * ew + eh * eh;
    let d_d2 = [
        if x1 < gx1 { -2.0 * ew } else { 0.0 },
        if y1 < gy1 { -2.0 * eh } else { 0.0 },
        if x2 > gx2 { 2.0 * ew } else { 0.0 },
        if y2 > gy2 { 2.0 * eh } else { 0.0 },
    ];
    let mut corner = [0.0; 4];
    for k in 0..4 {
        let d_pen = (d_rho2[k] * d2 - rho2 * d_d2[k]) / (d2 * d2);
        corner[k] = -d_iou[k] + d_pen;
    }
    // x = x1, w = x2 - x1  =>  dL/dx = dL/dx1 + dL/dx2, dL/dw = dL/dx2.
    let grad = [
        corner[0] + corner[2],
        corner[1] + corner[3],
        corner[2],
        corner[3],
    ];
    Ok((loss, grad))
}

fn smooth_l1(z: f64, delta: f64) -> (f64, f64) {
    if z.abs() < delta {
        (0.5 * z * z / delta, z / delta)
    } else {
        (z.abs() - 0.5 * delta, z.signum())
    }
}

/// Penalty for every side on which `extra` fails to cover `base`, with the
/// gradient over `extra`'s `(x, y, w, h)`.
pub fn constraint_loss(extra: &BBox, base: &BBox, cfg: &LossConfig) -> (f64, [f64; 4]) {
    let delta = cfg.smooth_l1_delta;
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    if extra.x() > base.x() {
        let (l, d) = smooth_l1(base.x() - extra.x(), delta);
        loss += l;
        grad[0] -= d;
    }
    if extra.y() > base.y() {
        let (l, d) = smooth_l1(base.y() - extra.y(), delta);
        loss += l;
        grad[1] -= d;
    }
    if extra.right() < base.right() {
        let (l, d) = smooth_l1(base.right() - extra.right(), delta);
        loss += l;
        grad[0] -= d;
        grad[2] -= d;
    }
    if extra.bottom() < base.bottom() {
        let (l, d) = smooth_l1(base.bottom() - extra.bottom(), delta);
        loss += l;
        grad[1] -= d;
        grad[3] -= d;
    }
    (loss, grad)
}

/// Individual terms of the total group loss.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupLossBreakdown {
    pub classification: f64,
    pub base_localization: f64,
    pub extra_localization: Vec<Option<f64>>,
    pub constraint: Vec<f64>,
}

impl GroupLossBreakdown {
    pub fn total(&self) -> f64 {
        self.classification
            + self.base_localization
            + self.extra_localization.iter().flatten().sum::<f64>()
            + self.constraint.iter().sum::<f64>()
    }
}

/// Per-term breakdown of [`total_group_loss`].
///
/// The coverage constraint is measured against the predicted base box and is
/// applied to every extra, annotated or not.
pub fn group_loss_terms(
    pred_class_prob: f64,
    pred_base: &BBox,
    pred_offsets: &[Offset],
    target: &GroupTarget,
    cfg: &LossConfig,
) -> Result<GroupLossBreakdown> {
    cfg.validate()?;
    if pred_offsets.len() != target.extras.len() {
        return Err(Error::ArityMismatch {
            expected: target.extras.len(),
            found: pred_offsets.len(),
            context: "predicted offsets vs target extras".into(),
        });
    }
    let extras = apply_offsets(pred_base, pred_offsets)?;
    let (classification, _) = focal_loss(pred_class_prob, true, cfg)?;
    let (base_localization, _) = diou_loss(pred_base, &target.base)?;
    let extra_localization = extras
        .iter()
        .zip(&target.extras)
        .map(|(pred, gt)| gt.as_ref().map(|gt| diou_loss(pred, gt).map(|(l, _)| l)).transpose())
        .collect::<Result<Vec<_>>>()?;
    let constraint = extras
        .iter()
        .map(|e| cfg.constraint_weight * constraint_loss(e, pred_base, cfg).0)
        .collect();
    Ok(GroupLossBreakdown {
        classification,
        base_localization,
        extra_localization,
        constraint,
    })
}

pub fn total_group_loss(
    pred_class_prob: f64,
    pred_base: &BBox,
    pred_offsets: &[Offset],
    target: &GroupTarget,
    cfg: &LossConfig,
) -> Result<f64> {
    group_loss_terms(pred_class_prob, pred_base, pred_offsets, target, cfg).map(|b| b.total())
}

/// Loss functions available to [`finite_difference_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// point = [pred x, y, w, h, gt x, y, w, h]; gradient over pred.
    Diou,
    /// point = [extra x, y, w, h, base x, y, w, h]; gradient over extra.
    Constraint,
    /// point = [logit, label (0 or 1)]; gradient over the logit.
    Focal,
}

impl LossKind {
    pub fn point_len(self) -> usize {
        match self {
            LossKind::Diou | LossKind::Constraint => 8,
            LossKind::Focal => 2,
        }
    }

    pub fn grad_len(self) -> usize {
        match self {
            LossKind::Diou | LossKind::Constraint => 4,
            LossKind::Focal => 1,
        }
    }

    fn evaluate(self, point: &[f64], cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
        match self {
            LossKind::Diou => {
                let pred = BBox::new(point[0], point[1], point[2], point[3])?;
                let gt = BBox::new(point[4], point[5], point[6], point[7])?;
                diou_loss(&pred, &gt).map(|(l, g)| (l, g.to_vec()))
            }
            LossKind::Constraint => {
                let extra = BBox::new(point[0], point[1], point[2], point[3])?;
                let base = BBox::new(point[4], point[5], point[6], point[7])?;
                let (l, g) = constraint_loss(&extra, &base, cfg);
                Ok((l, g.to_vec()))
            }
            LossKind::Focal => {
                let positive = point[1] >= 0.5;
                let (l, g) = focal_loss(sigmoid(point[0]), positive, cfg)?;
                Ok((l, vec![g]))
            }
        }
    }

    /// Describes the nearest piecewise boundary within `margin`, if any.
    fn kink(self, point: &[f64], margin: f64, cfg: &LossConfig) -> Option<String> {
        let edges = |p: &[f64]| {
            [p[0], p[1], p[0] + p[2], p[1] + p[3], p[4], p[5], p[4] + p[6], p[5] + p[7]]
        };
        match self {
            LossKind::Diou => {
                let e = edges(point);
                let checks = [
                    ("pred left = gt left", e[0] - e[4]),
                    ("pred top = gt top", e[1] - e[5]),
                    ("pred right = gt right", e[2] - e[6]),
                    ("pred bottom = gt bottom", e[3] - e[7]),
                    ("pred right = gt left", e[2] - e[4]),
                    ("pred left = gt right", e[0] - e[6]),
                    ("pred bottom = gt top", e[3] - e[5]),
                    ("pred top = gt bottom", e[1] - e[7]),
                ];
                checks
                    .iter()
                    .find(|(_, d)| d.abs() <= margin)
                    .map(|(name, _)| (*name).to_string())
            }
            LossKind::Constraint => {
                let e = edges(point);
                let delta = cfg.smooth_l1_delta;
                let gaps = [
                    ("left", e[4] - e[0]),
                    ("top", e[5] - e[1]),
                    ("right", e[6] - e[2]),
                    ("bottom", e[7] - e[3]),
                ];
                for (side, gap) in gaps {
                    if gap.abs() <= margin {
                        return Some(format!("{side} branch boundary (extra edge = base edge)"));
                    }
                    if (gap.abs() - delta).abs() <= margin {
                        return Some(format!("{side} smooth-L1 transition"));
                    }
                }
                None
            }
            LossKind::Focal => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateCheck {
    pub coordinate: usize,
    pub analytic: Option<f64>,
    pub numeric: Option<f64>,
    pub rel_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    pub loss: LossKind,
    pub point: Vec<f64>,
    pub epsilon: f64,
    pub value: f64,
    pub kink: Option<String>,
    pub coordinates: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
}

impl GradientReport {
    /// True when the point is smooth, no evaluation failed and the error is below `tol`.
    pub fn passes(&self, tol: f64) -> bool {
        self.kink.is_none()
            && self.coordinates.iter().all(|c| c.failure.is_none())
            && self.max_rel_error < tol
    }
}

/// Denominator floor for relative errors. Components smaller than this are
/// compared in absolute terms: at `epsilon = 1e-5` central differences carry
/// round-off near `1e-9` even where the true derivative is exactly zero.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

pub fn finite_difference_check(
    kind: LossKind,
    point: &[f64],
    epsilon: f64,
    cfg: &LossConfig,
) -> Result<GradientReport> {
    if point.len() != kind.point_len() {
        return Err(Error::InvalidArgument(format!(
            "{kind:?} expects a point of length {}, got {}",
            kind.point_len(),
            point.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    cfg.validate()?;
    let (value, analytic) = kind.evaluate(point, cfg)?;
    let kink = kind.kink(point, 2.0 * epsilon, cfg);

    let mut coordinates = Vec::with_capacity(kind.grad_len());
    let mut max_rel_error = 0.0f64;
    let mut worst_coordinate = None;
    for k in 0..kind.grad_len() {
        let mut plus = point.to_vec();
        let mut minus = point.to_vec();
        plus[k] += epsilon;
        minus[k] -= epsilon;
        let numeric = match (kind.evaluate(&plus, cfg), kind.evaluate(&minus, cfg)) {
            (Ok((lp, _)), Ok((lm, _))) => Ok((lp - lm) / (2.0 * epsilon)),
            (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
        };
        let check = match numeric {
            Ok(n) => {
                let rel = relative_error(analytic[k], n);
                if rel > max_rel_error || worst_coordinate.is_none() {
                    max_rel_error = max_rel_error.max(rel);
                    worst_coordinate = Some(k);
                }
                CoordinateCheck {
                    coordinate: k,
                    analytic: Some(analytic[k]),
                    numeric: Some(n),
                    rel_error: Some(rel),
                    failure: None,
                }
            }
            Err(msg) => CoordinateCheck {
                coordinate: k,
                analytic: Some(analytic[k]),
                numeric: None,
                rel_error: None,
                failure: Some(msg),
            },
        };
        coordinates.push(check);
    }
    Ok(GradientReport {
        loss: kind,
        point: point.to_vec(),
        epsilon,
        value,
        kink,
        coordinates,
        max_rel_error,
        worst_coordinate,
    })
}
