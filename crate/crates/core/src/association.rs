//! Post-hoc pairing of independently detected base and extra boxes.
//!
//! This is the baseline that grouped prediction is compared against: each
//! class is detected on its own and the boxes are afterwards paired by a
//! minimum-cost bipartite assignment on `1 - IoU`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::group::{Detection, GroupDetection, ImageId};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AssignmentResult {
    /// `(row, column)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost assignment on a dense `n x m` matrix with `n <= m`.
/// Returns the column assigned to every row.
fn solve_dense(cost: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = cost.len();
    // Shortest augmenting paths with potentials, 1-based bookkeeping.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for col in 1..=m {
                if used[col] {
                    continue;
                }
                let reduced = cost[r - 1][col - 1] - u[r] - v[col];
                if reduced < minv[col] {
                    minv[col] = reduced;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=m {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![usize::MAX; n];
    for col in 1..=m {
        if owner[col] != 0 {
            assignment[owner[col] - 1] = col - 1;
        }
    }
    assignment
}

/// Minimum-total-cost one-to-one assignment that never uses a forbidden entry.
///
/// Among assignments of maximum cardinality over the allowed entries, the
/// cheapest one is returned; rows or columns whose only options are forbidden
/// stay unmatched. An empty matrix yields an empty result.
pub fn hungarian_assign(cost: &[Vec<f64>], forbid: Option<&[Vec<bool>]>) -> Result<AssignmentResult> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if let Some(r) = cost.iter().position(|r| r.len() != cols) {
        return Err(Error::InvalidArgument(format!("cost row {r} has a different length")));
    }
    if let Some(f) = forbid {
        if f.len() != rows || f.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("forbid mask shape differs from cost matrix".into()));
        }
    }
    let allowed = |r: usize, c: usize| forbid.is_none_or(|f| !f[r][c]);
    if rows == 0 || cols == 0 {
        return Ok(AssignmentResult {
            unmatched_rows: (0..rows).collect(),
            unmatched_cols: (0..cols).collect(),
            ..Default::default()
        });
    }

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in 0..rows {
        for c in 0..cols {
            if allowed(r, c) {
                let v = cost[r][c];
                if !v.is_finite() {
                    return Err(Error::InvalidArgument(format!("non-finite cost at ({r}, {c})")));
                }
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if lo > hi {
        return Ok(AssignmentResult {
            unmatched_rows: (0..rows).collect(),
            unmatched_cols: (0..cols).collect(),
            ..Default::default()
        });
    }
    // Any extra allowed pair outweighs every possible difference in cost.
    let k = rows.min(cols) as f64;
    let big = hi + (hi - lo + 1.0) * (k + 1.0);

    let transpose = rows > cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    let dense: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let (r, c) = if transpose { (j, i) } else { (i, j) };
                    if allowed(r, c) {
                        cost[r][c]
                    } else {
                        big
                    }
                })
                .collect()
        })
        .collect();
    let assignment = solve_dense(&dense, m);

    let mut pairs: Vec<(usize, usize)> = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| if transpose { (j, i) } else { (i, j) })
        .filter(|&(r, c)| allowed(r, c))
        .collect();
    pairs.sort_unstable();
    let mut row_used = vec![false; rows];
    let mut col_used = vec![false; cols];
    let mut total_cost = 0.0;
    for &(r, c) in &pairs {
        row_used[r] = true;
        col_used[c] = true;
        total_cost += cost[r][c];
    }
    Ok(AssignmentResult {
        pairs,
        unmatched_rows: (0..rows).filter(|&r| !row_used[r]).collect(),
        unmatched_cols: (0..cols).filter(|&c| !col_used[c]).collect(),
        total_cost,
    })
}

/// Pairs one base detection list with several extra-class lists, one per
/// extra slot, image by image.
///
/// The cost of a pair is `1 - IoU`; pairs with `IoU <= iou_floor` are
/// forbidden. Every base detection yields one group carrying its score and
/// class; slots left unpaired are `None`. Groups are returned in the order of
/// `bases`.
pub fn pair_slots(bases: &[Detection], extra_slots: &[Vec<Detection>], iou_floor: f64) -> Result<Vec<GroupDetection>> {
    if !(0.0..1.0).contains(&iou_floor) {
        return Err(Error::InvalidArgument(format!("iou_floor must lie in [0, 1), got {iou_floor}")));
    }
    let mut groups: Vec<GroupDetection> = bases
        .iter()
        .map(|d| GroupDetection {
            image_id: d.image_id,
            class_id: d.class_id,
            score: d.score,
            base: d.bbox,
            extras: vec![None; extra_slots.len()],
        })
        .collect();
    let mut images: Vec<ImageId> = bases.iter().map(|d| d.image_id).collect();
    images.sort_unstable();
    images.dedup();
    for image in images {
        let rows: Vec<usize> = (0..bases.len()).filter(|&i| bases[i].image_id == image).collect();
        for (slot, extras) in extra_slots.iter().enumerate() {
            let cols: Vec<usize> = (0..extras.len()).filter(|&j| extras[j].image_id == image).collect();
            if cols.is_empty() {
                continue;
            }
            let overlap: Vec<Vec<f64>> = rows
                .iter()
                .map(|&i| cols.iter().map(|&j| iou(&bases[i].bbox, &extras[j].bbox)).collect())
                .collect();
            let cost: Vec<Vec<f64>> = overlap.iter().map(|r| r.iter().map(|v| 1.0 - v).collect()).collect();
            let forbid: Vec<Vec<bool>> = overlap.iter().map(|r| r.iter().map(|&v| v <= iou_floor).collect()).collect();
            let result = hungarian_assign(&cost, Some(&forbid))?;
            for (r, c) in result.pairs {
                groups[rows[r]].extras[slot] = Some(extras[cols[c]].bbox);
            }
        }
    }
    Ok(groups)
}

/// Single-extra form of [`pair_slots`].
pub fn pair_by_iou(bases: &[Detection], extras: &[Detection], iou_floor: f64) -> Result<Vec<GroupDetection>> {
    pair_slots(bases, &[extras.to_vec()], iou_floor)
}
