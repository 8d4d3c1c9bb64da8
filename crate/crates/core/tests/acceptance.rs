// Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
// criterion and exits non-zero when any of them fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use detmatch::analysis::{assign_to_strides, overlap_histogram, AssignmentView, StrideSpec};
use detmatch::association::hungarian_assign;
use detmatch::coco::{convert_coco_value, DEFAULT_TORSO_MARGIN};
use detmatch::io::{
    detections_from_value, detections_to_value, groups_from_value, groups_to_value, load_detections, load_groups,
    save_detections, save_groups, to_canonical_string, DatasetHeader, DetectionFile, GroupDataset, LoadOptions,
};
use detmatch::losses::{constraint_loss, diou_loss, LossConfig};
use detmatch::metrics::{evaluate, Role};
use detmatch::sim::{
    generate_scenes, run_experiment, run_seed, scenes_dataset, simulate_detector, DetectorMode, Pipeline, SimConfig,
};
use detmatch::suppression::{group_suppress, SuppressionMode, SuppressionParams};
use detmatch::{BBox, Detection, GroupDetection, GroupLabel};

type Outcome = Result<String, String>;

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 group suppression matches brute force", c1_suppression_exactness),
        ("2 hungarian cost equals permutation minimum", c2_hungarian_optimality),
        ("3 loss gradients match central differences", c3_loss_gradients),
        ("4 matching metrics stay within per-class range", c4_metric_range),
        ("5 AP and MR on micro datasets match enumeration", c5_metric_oracle),
        ("6 grouped prediction widens the matching gap", c6_matching_gap),
        ("7 overlap histogram mean tracks the preset", c7_overlap_histogram),
        ("8 same-stride fraction separates the presets", c8_same_stride),
        ("9 noiseless limit gives perfect matching AP", c9_noiseless),
        ("10 outputs are deterministic and round-trip", c10_determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name} ({secs:.2}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.2}s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(limit: Duration, start: Instant, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    if took < limit {
        Ok(())
    } else {
        Err(format!("{what} took {took:?}, limit {limit:?}"))
    }
}

// ---------------------------------------------------------------- oracles

/// IoU from corner coordinates, computed independently of the library.
fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.x(), a.y(), a.x() + a.w(), a.y() + a.h());
    let (bx1, by1, bx2, by2) = (b.x(), b.y(), b.x() + b.w(), b.y() + b.h());
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.w() * a.h() + b.w() * b.h() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Quadratic reference: repeatedly take the best remaining group and drop
/// everything it suppresses.
fn oracle_suppress(groups: &[GroupDetection], thr: f64, mode: SuppressionMode) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..groups.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if groups[i].score > groups[best].score || (groups[i].score == groups[best].score && i < best) {
                best = i;
            }
        }
        kept.push(best);
        let top = &groups[best];
        alive.retain(|&j| {
            if j == best {
                return false;
            }
            let g = &groups[j];
            if g.image_id != top.image_id || g.class_id != top.class_id {
                return true;
            }
            let mut ious = vec![oracle_iou(&top.base, &g.base)];
            for (a, b) in top.extras.iter().zip(&g.extras) {
                ious.push(match (a, b) {
                    (Some(a), Some(b)) => oracle_iou(a, b),
                    _ => 0.0,
                });
            }
            let suppressed = match mode {
                SuppressionMode::BaseOnly => ious[0] > thr,
                SuppressionMode::Joint => ious.iter().any(|&v| v > thr),
                SuppressionMode::Set => ious.iter().all(|&v| v > thr),
                SuppressionMode::PerClass => unreachable!(),
            };
            !suppressed
        });
    }
    kept
}

fn rand_box(rng: &mut ChaCha8Rng, cx: f64, cy: f64, spread: f64) -> BBox {
    let w = rng.random_range(8.0..40.0);
    let h = rng.random_range(8.0..60.0);
    let x = (cx + rng.random_range(-spread..spread)).max(0.0);
    let y = (cy + rng.random_range(-spread..spread)).max(0.0);
    BBox::new(x, y, w, h).unwrap()
}

fn random_groups(rng: &mut ChaCha8Rng) -> Vec<GroupDetection> {
    let n = rng.random_range(0..=50);
    let arity = rng.random_range(0..=3);
    let images = rng.random_range(1..=3u64);
    let classes = rng.random_range(1..=2u32);
    let centers: Vec<(f64, f64)> = (0..rng.random_range(1..=5))
        .map(|_| (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)))
        .collect();
    let quantized = rng.random_bool(0.3);
    (0..n)
        .map(|_| {
            let (cx, cy) = centers[rng.random_range(0..centers.len())];
            let spread = rng.random_range(1.0..15.0);
            let base = rand_box(rng, cx, cy, spread);
            let extras = (0..arity)
                .map(|_| (!rng.random_bool(0.15)).then(|| rand_box(rng, cx, cy, spread)))
                .collect();
            let score: f64 = rng.random_range(0.0..1.0);
            GroupDetection {
                image_id: rng.random_range(0..images),
                class_id: rng.random_range(0..classes),
                score: if quantized { (score * 10.0).round() / 10.0 } else { score },
                base,
                extras,
            }
        })
        .collect()
}

fn c1_suppression_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut discrepancies = 0;
    let mut total_kept = [0usize; 3];
    for _ in 0..1000 {
        let groups = random_groups(&mut rng);
        let thr = rng.random_range(0.2..0.8);
        for (m, mode) in SuppressionMode::GROUP_MODES.into_iter().enumerate() {
            let got = group_suppress(&groups, &SuppressionParams::new(thr, mode).unwrap()).map_err(|e| e.to_string())?;
            let want = oracle_suppress(&groups, thr, mode);
            total_kept[m] += want.len();
            if got != want {
                discrepancies += 1;
            }
        }
    }
    if discrepancies > 0 {
        return Err(format!("{discrepancies} discrepancies over 3000 mode runs"));
    }
    within(Duration::from_secs(10), start, "1,000 instances")?;
    Ok(format!(
        "1000 instances x 3 modes, 0 discrepancies (kept base/joint/set = {}/{}/{}) in {:.2?}",
        total_kept[0],
        total_kept[1],
        total_kept[2],
        start.elapsed()
    ))
}

/// Minimum over all permutations, summing in row order.
fn permutation_minimum(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut [bool], acc: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
        if row == cost.len() {
            let total = acc.iter().enumerate().fold(0.0, |s, (r, &c)| s + cost[r][c]);
            if total < best.0 {
                *best = (total, acc.clone());
            }
            return;
        }
        for c in 0..cost.len() {
            if !used[c] {
                used[c] = true;
                acc.push(c);
                go(cost, row + 1, used, acc, best);
                acc.pop();
                used[c] = false;
            }
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    go(cost, 0, &mut vec![false; cost.len()], &mut Vec::new(), &mut best);
    best
}

fn c2_hungarian_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut mismatches = 0;
    for k in 0..500 {
        let n = rng.random_range(1..=8);
        let integer = k % 2 == 0;
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| if integer { f64::from(rng.random_range(0..50u32)) } else { rng.random_range(0.0..1.0) })
                    .collect()
            })
            .collect();
        let r = hungarian_assign(&cost, None).map_err(|e| e.to_string())?;
        let mut assignment = vec![usize::MAX; n];
        for &(i, j) in &r.pairs {
            assignment[i] = j;
        }
        if r.pairs.len() != n {
            mismatches += 1;
            continue;
        }
        let got = assignment.iter().enumerate().fold(0.0, |s, (i, &j)| s + cost[i][j]);
        let (best, _) = permutation_minimum(&cost);
        if got != best {
            mismatches += 1;
        }
    }
    if mismatches > 0 {
        return Err(format!("{mismatches} of 500 matrices not optimal"));
    }
    within(Duration::from_secs(30), start, "500 matrices")?;
    Ok(format!("500 matrices (n <= 8, half integer, half real) all optimal in {:.2?}", start.elapsed()))
}

const FD_EPS: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-3;

// Relative error with a denominator floor: exact zeros (opposite sides
// cancelling) are compared against central-difference round-off.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn central_difference(f: impl Fn(&[f64; 4]) -> f64, at: [f64; 4]) -> [f64; 4] {
    std::array::from_fn(|k| {
        let (mut p, mut m) = (at, at);
        p[k] += FD_EPS;
        m[k] -= FD_EPS;
        (f(&p) - f(&m)) / (2.0 * FD_EPS)
    })
}

fn bb(v: &[f64; 4]) -> BBox {
    BBox::new(v[0], v[1], v[2], v[3]).unwrap()
}

/// DIoU is non-smooth where an edge of one box meets an edge of the other.
fn diou_kink(p: &[f64; 4], g: &[f64; 4]) -> bool {
    let near = |a: f64, b: f64| (a - b).abs() < KINK_MARGIN;
    let (px, gx) = ([p[0], p[0] + p[2]], [g[0], g[0] + g[2]]);
    let (py, gy) = ([p[1], p[1] + p[3]], [g[1], g[1] + g[3]]);
    px.iter().any(|&a| gx.iter().any(|&b| near(a, b))) || py.iter().any(|&a| gy.iter().any(|&b| near(a, b)))
}

/// Smooth-L1 sides switch branch at a zero gap and at a gap of delta.
fn constraint_kink(e: &[f64; 4], b: &[f64; 4], delta: f64) -> bool {
    let gaps = [e[0] - b[0], e[1] - b[1], (b[0] + b[2]) - (e[0] + e[2]), (b[1] + b[3]) - (e[1] + e[3])];
    gaps.iter().any(|&g| g.abs() < KINK_MARGIN || (g.abs() - delta).abs() < KINK_MARGIN)
}

fn c3_loss_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let cfg = LossConfig::default();

    let mut diou_worst = 0.0f64;
    let mut checked = 0;
    while checked < 1000 {
        let g = [rng.random_range(0.0..50.0), rng.random_range(0.0..50.0), rng.random_range(5.0..40.0), rng.random_range(5.0..40.0)];
        let p = [
            g[0] + rng.random_range(-30.0..30.0),
            g[1] + rng.random_range(-30.0..30.0),
            rng.random_range(3.0..45.0),
            rng.random_range(3.0..45.0),
        ];
        if diou_kink(&p, &g) {
            continue;
        }
        let gt = bb(&g);
        let (_, analytic) = diou_loss(&bb(&p), &gt).map_err(|e| e.to_string())?;
        let numeric = central_difference(|q| diou_loss(&bb(q), &gt).unwrap().0, p);
        for k in 0..4 {
            diou_worst = diou_worst.max(rel_err(analytic[k], numeric[k]));
        }
        checked += 1;
    }

    let mut constraint_worst = 0.0f64;
    let mut active_sides = 0;
    checked = 0;
    while checked < 1000 {
        let b = [rng.random_range(0.0..50.0), rng.random_range(0.0..50.0), rng.random_range(10.0..40.0), rng.random_range(10.0..40.0)];
        let (l, t, r, d) = (
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        let e = [b[0] + l, b[1] + t, b[2] - l + r, b[3] - t + d];
        if constraint_kink(&e, &b, cfg.smooth_l1_delta) {
            continue;
        }
        let base = bb(&b);
        let (_, analytic) = constraint_loss(&bb(&e), &base, &cfg);
        let numeric = central_difference(|q| constraint_loss(&bb(q), &base, &cfg).0, e);
        for k in 0..4 {
            constraint_worst = constraint_worst.max(rel_err(analytic[k], numeric[k]));
        }
        active_sides += [l > 0.0, t > 0.0, r < 0.0, d < 0.0].iter().filter(|a| **a).count();
        checked += 1;
    }

    let detail = format!(
        "max relative error diou {diou_worst:.2e}, constraint {constraint_worst:.2e} over 1000 points each ({active_sides} active constraint sides)"
    );
    if diou_worst < 1e-4 && constraint_worst < 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_eval_case(rng: &mut ChaCha8Rng) -> (GroupDataset, Vec<GroupDetection>) {
    let arity = rng.random_range(1..=3);
    let classes = rng.random_range(1..=2u32);
    let header = DatasetHeader::new(
        (0..classes).map(|c| format!("c{c}")).collect(),
        (0..arity).map(|s| format!("e{s}")).collect(),
    );
    let mut ds = GroupDataset::new(header);
    let images = rng.random_range(1..=5u64);
    ds.images = (0..images).collect();
    let mut dets = Vec::new();
    let sigma = rng.random_range(0.0..6.0);
    for image in 0..images {
        for gid in 0..rng.random_range(0..=6u64) {
            let cx = rng.random_range(0.0..300.0);
            let cy = rng.random_range(0.0..300.0);
            let class = rng.random_range(0..classes);
            let base = rand_box(rng, cx, cy, 5.0);
            let extras: Vec<BBox> = (0..arity).map(|_| rand_box(rng, cx, cy, 5.0)).collect();
            ds.groups.push(GroupLabel::new(image, gid, class, base, extras.iter().copied().map(Some).collect()));
            for _ in 0..rng.random_range(0..=2) {
                let jitter = |b: &BBox, rng: &mut ChaCha8Rng| {
                    let mut n = || rng.random_range(-sigma..=sigma);
                    BBox::new((b.x() + n()).max(0.0), (b.y() + n()).max(0.0), (b.w() + n()).max(1.0), (b.h() + n()).max(1.0)).unwrap()
                };
                let db = jitter(&base, rng);
                let de = extras.iter().map(|e| (!rng.random_bool(0.1)).then(|| jitter(e, rng))).collect();
                dets.push(GroupDetection {
                    image_id: image,
                    class_id: if rng.random_bool(0.9) { class } else { rng.random_range(0..classes) },
                    score: (rng.random_range(0.0..1.0f64) * 20.0).round() / 20.0,
                    base: db,
                    extras: de,
                });
            }
        }
        for _ in 0..rng.random_range(0..=3) {
            let (cx, cy) = (rng.random_range(0.0..300.0), rng.random_range(0.0..300.0));
            dets.push(GroupDetection {
                image_id: image,
                class_id: rng.random_range(0..classes),
                score: rng.random_range(0.0..1.0),
                base: rand_box(rng, cx, cy, 5.0),
                extras: (0..arity).map(|_| Some(rand_box(rng, cx, cy, 5.0))).collect(),
            });
        }
    }
    (ds, dets)
}

fn c4_metric_range() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let (mut violations, mut comparisons) = (0, 0);
    let mut first = None;
    for case in 0..500 {
        let (ds, dets) = random_eval_case(&mut rng);
        let thr = [0.3, 0.5, 0.7][case % 3];
        let r = evaluate(&ds, &dets, thr).map_err(|e| format!("case {case}: {e}"))?;
        for m in &r.matching {
            let per: Vec<_> = r.per_class.iter().filter(|c| c.class_id == m.class_id).collect();
            for c in per {
                if let (Some(am), Some(ac)) = (m.ap, c.ap) {
                    comparisons += 1;
                    if am > ac + 1e-12 {
                        violations += 1;
                        first.get_or_insert(format!("case {case}: AP_match {am} > AP {} {ac}", c.name));
                    }
                }
                if let (Some(mm), Some(mc)) = (m.mr, c.mr) {
                    comparisons += 1;
                    if mm < mc - 1e-12 {
                        violations += 1;
                        first.get_or_insert(format!("case {case}: MR_match {mm} < MR {} {mc}", c.name));
                    }
                }
            }
        }
    }
    if violations == 0 {
        Ok(format!("500 datasets, {comparisons} comparisons, 0 violations"))
    } else {
        Err(format!("{violations} violations; first: {}", first.unwrap_or_default()))
    }
}

// A micro dataset: per image, the number of GT groups and the detections.
// Each detection hits GT `k` (base shifted by one pixel), or is a stray box
// when `k` is None; `extra_ok` says whether its extra box is placed on the
// GT extra or far away.
struct MicroDet {
    score: f64,
    hit: Option<usize>,
    extra_ok: bool,
}

struct Micro {
    images: Vec<(usize, Vec<MicroDet>)>,
    with_extras: bool,
    /// Hand-computed (AP_base, MR_base), where worked out on paper.
    hand: Option<(f64, f64)>,
}

fn d(score: f64, hit: Option<usize>) -> MicroDet {
    MicroDet { score, hit, extra_ok: true }
}

fn dx(score: f64, hit: Option<usize>, extra_ok: bool) -> MicroDet {
    MicroDet { score, hit, extra_ok }
}

fn micro_datasets() -> Vec<Micro> {
    let mr_fp_first = 10f64.powf(-10.0 / 9.0);
    let m = |images: Vec<(usize, Vec<MicroDet>)>| Micro { images, with_extras: false, hand: None };
    let mx = |images: Vec<(usize, Vec<MicroDet>)>| Micro { images, with_extras: true, hand: None };
    let h = |images: Vec<(usize, Vec<MicroDet>)>, ap: f64, mr: f64| Micro { images, with_extras: false, hand: Some((ap, mr)) };
    vec![
        h(vec![(1, vec![d(0.9, Some(0))])], 1.0, 1e-10),
        h(vec![(1, vec![d(0.9, Some(0)), d(0.8, Some(0))])], 1.0, 1e-10),
        h(vec![(2, vec![])], 0.0, 1.0),
        h(vec![(2, vec![d(0.9, None), d(0.8, Some(0)), d(0.7, Some(1))])], 2.0 / 3.0, mr_fp_first),
        // TP, FP, TP on two GTs: envelope 1 then 2/3.
        h(vec![(2, vec![d(0.9, Some(0)), d(0.8, None), d(0.7, Some(1))])], 0.5 + 0.5 * 2.0 / 3.0, 0.5f64.powf(8.0 / 9.0) * 1e-10f64.powf(1.0 / 9.0)),
        // Half recall, no false positives: MR 0.5 everywhere.
        h(vec![(2, vec![d(0.9, Some(0))])], 0.5, 0.5),
        m(vec![(3, vec![d(0.95, Some(2)), d(0.9, None), d(0.6, Some(0)), d(0.3, None)]), (1, vec![d(0.8, Some(0))])]),
        m(vec![(0, vec![d(0.9, None), d(0.5, None)]), (2, vec![d(0.7, Some(0)), d(0.65, Some(1))])]),
        m(vec![(1, vec![d(0.2, Some(0))]), (1, vec![d(0.9, None), d(0.85, None)]), (1, vec![d(0.4, Some(0))])]),
        m((0..10).map(|i| (1, vec![d(0.05 + 0.09 * i as f64, if i % 3 == 0 { None } else { Some(0) })])).collect()),
        m((0..10).map(|i| (2, vec![d(0.99 - 0.01 * i as f64, Some(0)), d(0.5 - 0.01 * i as f64, None)])).collect()),
        m(vec![(4, vec![d(0.9, Some(0)), d(0.89, Some(0)), d(0.88, Some(1)), d(0.87, Some(1)), d(0.5, Some(3))])]),
        m(vec![(1, vec![]), (1, vec![]), (2, vec![d(0.3, Some(1)), d(0.31, None), d(0.32, Some(0))])]),
        m((0..6).map(|i| (i % 3, (0..i % 3).map(|k| d(0.1 * (i + k + 1) as f64 - 0.05, Some(k))).chain([d(0.331 + 0.01 * i as f64, None)]).collect())).collect()),
        mx(vec![(1, vec![dx(0.9, Some(0), true)])]),
        mx(vec![(2, vec![dx(0.9, Some(0), false), dx(0.8, Some(1), true)])]),
        mx(vec![(2, vec![dx(0.9, Some(0), true), dx(0.85, None, true), dx(0.8, Some(1), false)]), (1, vec![dx(0.7, Some(0), true)])]),
        mx(vec![(3, vec![dx(0.6, Some(0), false), dx(0.55, Some(0), true), dx(0.5, Some(1), true), dx(0.4, Some(2), false)])]),
        mx((0..8).map(|i| (1, vec![dx(0.9 - 0.1 * i as f64, Some(0), i % 2 == 0), dx(0.85 - 0.1 * i as f64, None, true)])).collect()),
        mx(vec![(2, vec![dx(0.7, Some(1), true), dx(0.65, Some(0), true)]), (2, vec![dx(0.99, None, false), dx(0.2, Some(0), false), dx(0.15, Some(1), true)])]),
    ]
}

fn gt_base(k: usize) -> BBox {
    BBox::new(40.0 * k as f64, 0.0, 10.0, 10.0).unwrap()
}

fn gt_extra(k: usize) -> BBox {
    BBox::new(40.0 * k as f64, 0.0, 12.0, 14.0).unwrap()
}

fn build_micro(m: &Micro) -> (GroupDataset, Vec<GroupDetection>) {
    let extra_names: Vec<String> = if m.with_extras { vec!["extra".into()] } else { vec![] };
    let mut ds = GroupDataset::new(DatasetHeader::new(vec!["base".into()], extra_names));
    let mut dets = Vec::new();
    for (image, (n_gt, image_dets)) in m.images.iter().enumerate() {
        let image = image as u64;
        ds.images.push(image);
        for k in 0..*n_gt {
            let extras = if m.with_extras { vec![Some(gt_extra(k))] } else { vec![] };
            ds.groups.push(GroupLabel::new(image, k as u64, 0, gt_base(k), extras));
        }
        for (j, md) in image_dets.iter().enumerate() {
            let (base, extra) = match md.hit {
                Some(k) => {
                    let b = gt_base(k);
                    let e = gt_extra(k);
                    let extra = if md.extra_ok {
                        BBox::new(e.x() + 1.0, e.y(), e.w(), e.h()).unwrap()
                    } else {
                        BBox::new(e.x(), 300.0, e.w(), e.h()).unwrap()
                    };
                    (BBox::new(b.x() + 1.0, b.y(), b.w(), b.h()).unwrap(), extra)
                }
                None => (
                    BBox::new(40.0 * j as f64, 500.0, 10.0, 10.0).unwrap(),
                    BBox::new(40.0 * j as f64, 500.0, 12.0, 14.0).unwrap(),
                ),
            };
            let extras = if m.with_extras { vec![Some(extra)] } else { vec![] };
            dets.push(GroupDetection { image_id: image, class_id: 0, score: md.score, base, extras });
        }
    }
    (ds, dets)
}

/// Greedy matching by descending score: a detection claims its best-IoU
/// unclaimed GT when that IoU exceeds the threshold. Returns the claimed GT
/// per detection, in input order.
fn oracle_match(items: &[(u64, f64, BBox)], gts: &[(u64, BBox)], thr: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].1.partial_cmp(&items[a].1).unwrap().then(a.cmp(&b)));
    let mut claimed = vec![false; gts.len()];
    let mut out = vec![None; items.len()];
    for i in order {
        let (img, _, bx) = items[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, (gimg, gb)) in gts.iter().enumerate() {
            if *gimg != img || claimed[g] {
                continue;
            }
            let v = oracle_iou(&bx, gb);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v > thr {
                claimed[g] = true;
                out[i] = Some(g);
            }
        }
    }
    out
}

fn oracle_labels(items: &[(u64, f64, BBox)], gts: &[(u64, BBox)], thr: f64) -> Vec<(f64, bool)> {
    oracle_match(items, gts, thr).into_iter().zip(items).map(|(m, it)| (it.1, m.is_some())).collect()
}

/// Group verdicts from the per-class matchings: a group is a TP when its base
/// claimed GT group `g` and, for every extra annotated on `g`, its extra in
/// that slot claimed the same `g`.
fn oracle_group_labels(dets: &[GroupDetection], gts: &[GroupLabel], thr: f64) -> Vec<(f64, bool)> {
    let items: Vec<_> = dets.iter().map(|d| (d.image_id, d.score, d.base)).collect();
    let pool: Vec<_> = gts.iter().map(|g| (g.image_id, g.base)).collect();
    let base = oracle_match(&items, &pool, thr);
    let arity = gts.first().map_or(0, |g| g.extras.len());
    let mut slots = Vec::new();
    for s in 0..arity {
        let di: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].extras[s].is_some()).collect();
        let gi: Vec<usize> = (0..gts.len()).filter(|&g| gts[g].extras[s].is_some()).collect();
        let items: Vec<_> = di.iter().map(|&i| (dets[i].image_id, dets[i].score, dets[i].extras[s].unwrap())).collect();
        let pool: Vec<_> = gi.iter().map(|&g| (gts[g].image_id, gts[g].extras[s].unwrap())).collect();
        let mut per_det = vec![None; dets.len()];
        for (k, m) in oracle_match(&items, &pool, thr).into_iter().enumerate() {
            per_det[di[k]] = m.map(|j| gi[j]);
        }
        slots.push(per_det);
    }
    (0..dets.len())
        .map(|i| {
            let tp = base[i].is_some_and(|g| (0..arity).all(|s| gts[g].extras[s].is_none() || slots[s][i] == Some(g)));
            (dets[i].score, tp)
        })
        .collect()
}

/// AP as the sum over TP ranks of `1 / num_gt` times the best precision at
/// that rank or later.
fn oracle_ap(labels: &[(f64, bool)], num_gt: usize) -> f64 {
    let mut sorted = labels.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut precision = Vec::new();
    let mut tp = 0;
    for (rank, &(_, is_tp)) in sorted.iter().enumerate() {
        tp += is_tp as usize;
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    let mut ap = 0.0;
    for k in 0..sorted.len() {
        if sorted[k].1 {
            let best = precision[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / num_gt as f64;
        }
    }
    ap
}

/// MR^-2: for each reference FPPI, the largest prefix of the ranking whose
/// FPPI stays at or below it.
fn oracle_mr(labels: &[(f64, bool)], num_gt: usize, num_images: usize) -> f64 {
    let mut sorted = labels.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut logs = 0.0;
    for k in 0..9 {
        let reference = 10f64.powf(-2.0 + 0.25 * k as f64);
        let mut miss = 1.0;
        for prefix in 0..=sorted.len() {
            let fp = sorted[..prefix].iter().filter(|l| !l.1).count();
            let tp = prefix - fp;
            if fp as f64 / num_images as f64 <= reference {
                miss = 1.0 - tp as f64 / num_gt as f64;
            }
        }
        logs += miss.max(1e-10).ln();
    }
    (logs / 9.0).exp()
}

fn c5_metric_oracle() -> Outcome {
    let sets = micro_datasets();
    let mut worst = 0.0f64;
    let mut checks = 0;
    for (i, m) in sets.iter().enumerate() {
        if m.images.len() > 10 {
            return Err(format!("micro dataset {i} has more than 10 images"));
        }
        let (ds, dets) = build_micro(m);
        let r = evaluate(&ds, &dets, 0.5).map_err(|e| format!("dataset {i}: {e}"))?;
        let num_images = ds.images.len();
        let base_items: Vec<(u64, f64, BBox)> = dets.iter().map(|g| (g.image_id, g.score, g.base)).collect();
        let base_gts: Vec<(u64, BBox)> = ds.groups.iter().map(|g| (g.image_id, g.base)).collect();
        let labels = oracle_labels(&base_items, &base_gts, 0.5);
        let mut expected = vec![(
            "base",
            r.get(0, Role::Base).and_then(|c| c.ap),
            r.get(0, Role::Base).and_then(|c| c.mr),
            oracle_ap(&labels, base_gts.len()),
            oracle_mr(&labels, base_gts.len(), num_images),
        )];
        if let Some((ap, mr)) = m.hand {
            expected.push(("hand", r.ap_base(), r.mr_base(), ap, mr));
        }
        if m.with_extras {
            let items: Vec<(u64, f64, BBox)> =
                dets.iter().filter_map(|g| g.extras[0].map(|e| (g.image_id, g.score, e))).collect();
            let gts: Vec<(u64, BBox)> = ds.groups.iter().map(|g| (g.image_id, g.extras[0].unwrap())).collect();
            let el = oracle_labels(&items, &gts, 0.5);
            expected.push((
                "extra",
                r.get(0, Role::Extra(0)).and_then(|c| c.ap),
                r.get(0, Role::Extra(0)).and_then(|c| c.mr),
                oracle_ap(&el, gts.len()),
                oracle_mr(&el, gts.len(), num_images),
            ));
            let gl = oracle_group_labels(&dets, &ds.groups, 0.5);
            expected.push(("match", r.ap_match(), r.mr_match(), oracle_ap(&gl, ds.groups.len()), oracle_mr(&gl, ds.groups.len(), num_images)));
        }
        for (what, ap, mr, want_ap, want_mr) in expected {
            if ds.groups.is_empty() {
                continue;
            }
            let (Some(ap), Some(mr)) = (ap, mr) else {
                return Err(format!("dataset {i} {what}: metric missing"));
            };
            let err = (ap - want_ap).abs().max((mr - want_mr).abs());
            if err > 1e-9 {
                return Err(format!("dataset {i} {what}: got AP {ap} MR {mr}, expected AP {want_ap} MR {want_mr}"));
            }
            worst = worst.max(err);
            checks += 1;
        }
    }
    Ok(format!("{} datasets, {checks} AP/MR pairs, max deviation {worst:.1e}", sets.len()))
}

/// P(X >= k) for X ~ Binomial(n, 1/2).
fn sign_test_p(k: usize, n: usize) -> f64 {
    let mut c = 1.0f64;
    let mut tail = 0.0;
    for i in 0..=n {
        if i >= k {
            tail += c;
        }
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

fn c6_matching_gap() -> Outcome {
    let start = Instant::now();
    let seeds: Vec<u64> = (1..=20).collect();
    let hockey = SimConfig::hockey();
    if (hockey.pair_iou_target, hockey.crowding, hockey.loc_noise_sigma, hockey.duplicates, hockey.fp_rate, hockey.images)
        != (0.94, 0.4, 0.05, 2, 1.0, 200)
    {
        return Err("hockey preset differs from the required parameters".into());
    }
    let torso = SimConfig::torso();
    let h = run_experiment(&hockey, &seeds).map_err(|e| e.to_string())?;
    let t = run_experiment(&torso, &seeds).map_err(|e| e.to_string())?;
    let hg = h.paired_gaps("ap_match");
    let tg = t.paired_gaps("ap_match");
    if hg.len() != 20 || tg.len() != 20 {
        return Err("AP_match undefined for some seed".into());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (hm, tm) = (mean(&hg), mean(&tg));
    let wins = hg.iter().filter(|g| **g > 0.0).count();
    let p = sign_test_p(wins, hg.len());
    let detail = format!(
        "hockey AP_match baseline {:.4} -> mp {:.4} (gap {hm:.4}, {wins}/20 seeds positive, sign test p = {p:.2e}); torso {:.4} -> {:.4} (gap {tm:.4})",
        h.summary(Pipeline::Baseline, "ap_match").unwrap().mean,
        h.summary(Pipeline::Mp, "ap_match").unwrap().mean,
        t.summary(Pipeline::Baseline, "ap_match").unwrap().mean,
        t.summary(Pipeline::Mp, "ap_match").unwrap().mean,
    );
    within(Duration::from_secs(300), start, "experiment")?;
    if hm > 0.0 && p < 0.01 && tm > 0.0 && tm < hm {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn preset_gts(cfg: &SimConfig) -> Result<Vec<GroupLabel>, String> {
    let scenes = generate_scenes(cfg).map_err(|e| e.to_string())?;
    Ok(scenes.into_iter().flat_map(|s| s.groups).collect())
}

fn c7_overlap_histogram() -> Outcome {
    let h = overlap_histogram(&preset_gts(&SimConfig::hockey())?, 20).map_err(|e| e.to_string())?;
    let t = overlap_histogram(&preset_gts(&SimConfig::torso())?, 20).map_err(|e| e.to_string())?;
    let detail = format!("hockey mean {:.4} (target 0.94 +- 0.02), torso mean {:.4} (target 0.50 +- 0.03)", h.mean, t.mean);
    if (h.mean - 0.94).abs() <= 0.02 && (t.mean - 0.50).abs() <= 0.03 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c8_same_stride() -> Outcome {
    let frac = |cfg: SimConfig| -> Result<f64, String> {
        let gts = preset_gts(&cfg)?;
        let r = assign_to_strides(&gts, &[], (cfg.image_width, cfg.image_height), &StrideSpec::default(), AssignmentView::Independent)
            .map_err(|e| e.to_string())?;
        Ok(r.same_stride_fraction)
    };
    let h = frac(SimConfig::hockey())?;
    let t = frac(SimConfig::torso())?;
    let detail = format!("same-stride fraction hockey {h:.4} (> 0.9), torso {t:.4} (< 0.6)");
    if h > 0.9 && t < 0.6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c9_noiseless() -> Outcome {
    let mut runs = Vec::new();
    for (name, cfg) in [("hockey", SimConfig::hockey()), ("torso", SimConfig::torso())] {
        for seed in 1..=3 {
            let o = run_seed(&cfg.clone().noiseless(), seed).map_err(|e| e.to_string())?;
            let (b, m) = (o.baseline.ap_match(), o.mp.ap_match());
            if b != Some(1.0) || m != Some(1.0) {
                return Err(format!("{name} seed {seed}: baseline {b:?}, mp {m:?}"));
            }
            runs.push(name);
        }
    }
    Ok(format!("{} noiseless runs, AP_match = 1.0 for both pipelines", runs.len()))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_detmatch")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("detmatch {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |n: &str| dir.path().join(n);
    let s = |n: &str| p(n).to_string_lossy().into_owned();

    fs::write(p("sim.toml"), "images = 40\ncrowding = 0.45\n").map_err(|e| e.to_string())?;
    run_cli(&["--seed", "7", "--threads", "1", "simulate", "--config", &s("sim.toml"), "--seeds", "3..6", "--out", &s("a.csv")])?;
    run_cli(&["--seed", "7", "--threads", "4", "simulate", "--config", &s("sim.toml"), "--seeds", "3..6", "--out", &s("b.csv")])?;
    let (a, b) = (read(&p("a.csv"))?, read(&p("b.csv"))?);
    if a != b || a.is_empty() {
        return Err("results.csv differs between identical runs".into());
    }

    // Groups, grouped detections and flat detections through the library.
    let cfg = SimConfig { images: 15, ..SimConfig::hockey() };
    let scenes = generate_scenes(&cfg).map_err(|e| e.to_string())?;
    let mut gt = scenes_dataset(&cfg, &scenes);
    gt.groups[0].ignore = true;
    gt.groups[1].extras[0] = None;
    let grouped: Vec<GroupDetection> = simulate_detector(&scenes, &cfg, DetectorMode::Grouped)
        .into_iter()
        .flat_map(|d| match d {
            detmatch::sim::SimDetections::Grouped { groups, .. } => groups,
            _ => unreachable!(),
        })
        .collect();
    let flat: Vec<Detection> = grouped.iter().map(|g| Detection { image_id: g.image_id, class_id: 0, score: g.score, bbox: g.base }).collect();
    save_groups(p("gt.json"), &gt).map_err(|e| e.to_string())?;
    save_detections(p("grouped.json"), &DetectionFile::grouped(Some(gt.header.clone()), grouped)).map_err(|e| e.to_string())?;
    save_detections(p("flat.json"), &DetectionFile::flat(None, flat)).map_err(|e| e.to_string())?;

    let coco = serde_json::json!({
        "images": [{"id": 3}],
        "categories": [{"id": 1, "name": "person"}],
        "annotations": [{"id": 9, "image_id": 3, "category_id": 1, "iscrowd": 0, "bbox": [10.5, 20.25, 40, 90],
            "keypoints": (0..51).map(|i| match i { 15 => 20.0, 16 => 40.0, 17 => 2.0, 36 => 40.0, 37 => 90.0, 38 => 2.0, _ => 0.0 }).collect::<Vec<f64>>()}],
    });
    let converted = convert_coco_value(coco, DEFAULT_TORSO_MARGIN).map_err(|e| e.to_string())?;
    save_groups(p("coco.json"), &converted).map_err(|e| e.to_string())?;

    let mut formats = 0;
    for name in ["gt.json", "coco.json"] {
        let original = read(&p(name))?;
        let ds = load_groups(p(name), LoadOptions::strict()).map_err(|e| e.to_string())?;
        save_groups(p("again.json"), &ds).map_err(|e| e.to_string())?;
        if read(&p("again.json"))? != original {
            return Err(format!("{name} changed after load and save"));
        }
        let text = String::from_utf8(original).unwrap();
        let value = groups_to_value(&groups_from_value(serde_json::from_str(&text).unwrap(), LoadOptions::default()).unwrap());
        if to_canonical_string(&value) != text {
            return Err(format!("{name} changed through the value round trip"));
        }
        formats += 1;
    }
    for name in ["grouped.json", "flat.json"] {
        let original = read(&p(name))?;
        let file = load_detections(p(name), LoadOptions::strict()).map_err(|e| e.to_string())?;
        save_detections(p("again.json"), &file).map_err(|e| e.to_string())?;
        if read(&p("again.json"))? != original {
            return Err(format!("{name} changed after load and save"));
        }
        let text = String::from_utf8(original).unwrap();
        let value = detections_to_value(&detections_from_value(serde_json::from_str(&text).unwrap(), LoadOptions::default()).unwrap());
        if to_canonical_string(&value) != text {
            return Err(format!("{name} changed through the value round trip"));
        }
        formats += 1;
    }

    // CLI outputs are stable too.
    for _ in 0..2 {
        run_cli(&["nms", "--mode", "set", "--iou", "0.5", "--input", &s("grouped.json"), "--output", &s("kept.json")])?;
        fs::rename(p("kept.json"), p(&format!("kept{formats}.json"))).map_err(|e| e.to_string())?;
        run_cli(&["eval", "--gt", &s("gt.json"), "--dets", &s("grouped.json"), "--report", &s("r.json"), "--curves", &s("c.csv")])?;
        fs::rename(p("c.csv"), p(&format!("c{formats}.csv"))).map_err(|e| e.to_string())?;
        formats += 1;
    }
    if read(&p("kept4.json"))? != read(&p("kept5.json"))? || read(&p("c4.csv"))? != read(&p("c5.csv"))? {
        return Err("CLI outputs differ between runs".into());
    }
    Ok(format!("results.csv identical across runs and thread counts ({} bytes); 4 JSON files round-trip byte-exactly", a.len()))
}
