//! Synthetic crowded scenes and simulated detector output.
//!
//! Scenes are built from clusters of groups. Inside a cluster each group is
//! displaced from its predecessor so that their base boxes overlap with IoU
//! exactly `crowding`; clusters are placed disjointly. Every extra box is
//! derived from its base with a per-group IoU drawn around
//! `pair_iou_target`, either enclosing the base (hockey-like player+stick)
//! or nested inside it (torso-like).
//!
//! Two detector models consume the scenes. The independent model reports
//! each class separately with its own score, noise and misses; the grouped
//! model reports one group per object with a single shared score. Both add
//! jittered duplicates and random false positives.
//!
//! All randomness comes from ChaCha8 with one stream per (image, purpose),
//! so results depend only on the configuration and seed, never on thread
//! scheduling.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::pair_slots;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::group::{ClassId, Detection, GroupDetection, GroupLabel, ImageId};
use crate::io::{DatasetHeader, GroupDataset};
use crate::metrics::{evaluate, EvalResult};
use crate::suppression::{group_suppress, per_class_nms, SuppressionMode, SuppressionParams};

/// How an extra box relates geometrically to its base box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtraShape {
    /// The extra covers the base (a player together with the stick).
    Enclosing,
    /// The extra lies inside the base (a torso within the person).
    Inner,
}

/// Generative and detector parameters. Deserializes from a flat TOML table
/// where every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub images: usize,
    pub groups_min: usize,
    pub groups_max: usize,
    pub image_width: f64,
    pub image_height: f64,
    /// Range of `sqrt(w * h)` for base boxes, sampled log-uniformly.
    pub min_size: f64,
    pub max_size: f64,
    /// Range of the `h / w` aspect ratio of base boxes.
    pub aspect_min: f64,
    pub aspect_max: f64,
    /// Target mean, over groups, of the largest base IoU with another group.
    pub crowding: f64,
    /// Largest number of groups in one cluster (at least 2 when crowded).
    pub cluster_max: usize,
    pub pair_iou_target: f64,
    /// Half-width of the uniform spread of per-group pair IoUs.
    pub pair_iou_spread: f64,
    pub extra_shape: ExtraShape,
    pub extra_classes: usize,
    pub detect_prob: f64,
    /// Standard deviation of edge noise, as a fraction of the box size.
    pub loc_noise_sigma: f64,
    /// Expected false detections (or false groups) per image and class.
    pub fp_rate: f64,
    /// Jittered copies emitted per true detection.
    pub duplicates: usize,
    /// Standard deviation of the score noise added to IoU-to-GT.
    pub score_sigma: f64,
    /// False-positive scores are uniform on `[0, fp_score_max)`.
    pub fp_score_max: f64,
    pub nms_iou: f64,
    pub eval_iou: f64,
    pub pair_iou_floor: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::hockey()
    }
}

/// Named parameter bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Hockey,
    Torso,
}

impl Preset {
    pub fn config(self) -> SimConfig {
        match self {
            Preset::Hockey => SimConfig::hockey(),
            Preset::Torso => SimConfig::torso(),
        }
    }
}

impl SimConfig {
    /// Highly overlapping groups: extras enclose the base with mean IoU 0.94.
    pub fn hockey() -> Self {
        SimConfig {
            images: 200,
            groups_min: 4,
            groups_max: 10,
            image_width: 1280.0,
            image_height: 720.0,
            min_size: 48.0,
            max_size: 192.0,
            aspect_min: 1.2,
            aspect_max: 2.2,
            crowding: 0.4,
            cluster_max: 3,
            pair_iou_target: 0.94,
            pair_iou_spread: 0.04,
            extra_shape: ExtraShape::Enclosing,
            extra_classes: 1,
            detect_prob: 0.9,
            loc_noise_sigma: 0.05,
            fp_rate: 1.0,
            duplicates: 2,
            score_sigma: 0.1,
            fp_score_max: 0.5,
            nms_iou: 0.5,
            eval_iou: 0.5,
            pair_iou_floor: 0.0,
            seed: 0,
        }
    }

    /// Loosely overlapping groups: extras nested in the base with mean IoU 0.5.
    pub fn torso() -> Self {
        SimConfig {
            pair_iou_target: 0.5,
            pair_iou_spread: 0.1,
            extra_shape: ExtraShape::Inner,
            ..SimConfig::hockey()
        }
    }

    /// Zero localization noise, no misses, duplicates or false positives.
    pub fn noiseless(mut self) -> Self {
        self.detect_prob = 1.0;
        self.loc_noise_sigma = 0.0;
        self.fp_rate = 0.0;
        self.duplicates = 0;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleConfig(m));
        if self.groups_min > self.groups_max {
            return bad(format!("groups_min {} exceeds groups_max {}", self.groups_min, self.groups_max));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad("size range must satisfy 0 < min_size <= max_size".into());
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max) {
            return bad("aspect range must satisfy 0 < aspect_min <= aspect_max".into());
        }
        if !(0.0..=MAX_CROWDING).contains(&self.crowding) {
            return bad(format!("crowding {} outside the achievable range [0, {MAX_CROWDING}]", self.crowding));
        }
        if self.crowding > 0.0 && self.cluster_max < 2 {
            return bad("crowding needs cluster_max >= 2".into());
        }
        if self.crowding > 0.0 && self.groups_min < 2 {
            return bad("crowding needs at least two groups per image".into());
        }
        if !(self.pair_iou_target > 0.0 && self.pair_iou_target <= 1.0) {
            return bad(format!("pair_iou_target {} outside (0, 1]", self.pair_iou_target));
        }
        if !(self.pair_iou_spread >= 0.0 && self.pair_iou_target - self.pair_iou_spread > 0.0) {
            return bad("pair_iou_spread must be >= 0 and keep the pair IoU positive".into());
        }
        for (name, p) in [("detect_prob", self.detect_prob), ("nms_iou", self.nms_iou), ("eval_iou", self.eval_iou), ("pair_iou_floor", self.pair_iou_floor), ("fp_score_max", self.fp_score_max)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return bad("nms_iou must lie strictly inside (0, 1)".into());
        }
        if !(self.loc_noise_sigma >= 0.0 && self.fp_rate >= 0.0 && self.score_sigma >= 0.0) {
            return bad("noise, fp_rate and score_sigma must be non-negative".into());
        }
        // The largest extra must fit in the frame.
        let widest = self.max_size * self.aspect_min.powf(-0.5) * self.extra_growth();
        let tallest = self.max_size * self.aspect_max.sqrt() * self.extra_growth();
        if widest > self.image_width || tallest > self.image_height {
            return bad("boxes do not fit the image".into());
        }
        Ok(())
    }

    /// Largest linear growth factor from base to extra.
    fn extra_growth(&self) -> f64 {
        match self.extra_shape {
            ExtraShape::Enclosing => 1.0 / (self.pair_iou_target - self.pair_iou_spread).max(1e-6),
            ExtraShape::Inner => 1.0,
        }
    }

    pub fn header(&self) -> DatasetHeader {
        let extras = match (self.extra_shape, self.extra_classes) {
            (ExtraShape::Enclosing, 1) => vec!["player+stick".to_string()],
            (ExtraShape::Inner, 1) => vec!["torso".to_string()],
            (_, n) => (0..n).map(|i| format!("extra{i}")).collect(),
        };
        let base = match self.extra_shape {
            ExtraShape::Enclosing => "player",
            ExtraShape::Inner => "person",
        };
        DatasetHeader::new(vec![base.to_string()], extras)
    }
}

/// Highest supported crowding; members of a cluster vary in size by a few
/// percent, which bounds the IoU reachable by pure displacement.
pub const MAX_CROWDING: f64 = 0.85;
const SIZE_JITTER: f64 = 0.03;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, Copy)]
enum Purpose {
    Scene = 0,
    Independent = 1,
    Grouped = 2,
}

fn stream_rng(seed: u64, image: usize, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image as u64 * 4 + purpose as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimScene {
    pub image_id: ImageId,
    pub groups: Vec<GroupLabel>,
}

/// Detections for one image together with where each came from.
#[derive(Debug, Clone, PartialEq)]
pub enum SimDetections {
    Independent {
        bases: Vec<Detection>,
        extras: Vec<Vec<Detection>>,
        base_sources: Vec<Source>,
        extra_sources: Vec<Vec<Source>>,
    },
    Grouped {
        groups: Vec<GroupDetection>,
        sources: Vec<Source>,
    },
}

/// Provenance of a simulated detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// Index of the ground-truth group in its scene, and the duplicate number (0 = primary).
    Truth { group: usize, copy: usize },
    FalsePositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    Independent,
    Grouped,
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        (rng.random_range(lo.ln()..hi.ln())).exp()
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Size of a base box: `(w, h)`.
fn sample_size<R: Rng>(rng: &mut R, cfg: &SimConfig) -> (f64, f64) {
    let s = log_uniform(rng, cfg.min_size, cfg.max_size);
    let a = uniform(rng, cfg.aspect_min, cfg.aspect_max);
    (s / a.sqrt(), s * a.sqrt())
}

/// Box with top-left at the origin displaced by `t` along `(ux, uy)`.
fn displaced(w: f64, h: f64, origin: (f64, f64), ux: f64, uy: f64, t: f64) -> BBox {
    BBox::new(origin.0 + ux * t, origin.1 + uy * t, w, h).expect("positive size")
}

/// Places a box of size `(w, h)` next to `prev` along `dir` so that their
/// IoU equals `target` (bisection on the displacement).
fn place_neighbor(prev: &BBox, w: f64, h: f64, dir: f64, target: f64) -> BBox {
    let (pcx, pcy) = prev.center();
    let origin = (pcx - w / 2.0, pcy - h / 2.0);
    let (ux, uy) = (dir.cos(), dir.sin());
    let (mut lo, mut hi) = (0.0, 2.0 * (prev.w() + prev.h() + w + h));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if iou(prev, &displaced(w, h, origin, ux, uy, mid)) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    displaced(w, h, origin, ux, uy, 0.5 * (lo + hi))
}

/// Extra box with `iou(base, extra) = t` exactly.
fn derive_extra<R: Rng>(rng: &mut R, base: &BBox, t: f64, shape: ExtraShape) -> BBox {
    if t >= 1.0 {
        return *base;
    }
    let split = uniform(rng, 0.3, 0.7);
    match shape {
        ExtraShape::Enclosing => {
            let grow = 1.0 / t;
            let (w, h) = (base.w() * grow.powf(split), base.h() * grow.powf(1.0 - split));
            let fx = uniform(rng, 0.0, 1.0);
            let fy = uniform(rng, 0.0, 1.0);
            BBox::new(base.x() - fx * (w - base.w()), base.y() - fy * (h - base.h()), w, h).expect("positive size")
        }
        ExtraShape::Inner => {
            let (w, h) = (base.w() * t.powf(split), base.h() * t.powf(1.0 - split));
            let fx = uniform(rng, 0.25, 0.75);
            let fy = uniform(rng, 0.2, 0.5);
            BBox::new(base.x() + fx * (base.w() - w), base.y() + fy * (base.h() - h), w, h).expect("positive size")
        }
    }
}

/// One cluster in local coordinates: `(base, extras)` per member.
fn build_cluster<R: Rng>(rng: &mut R, cfg: &SimConfig, members: usize) -> Vec<(BBox, Vec<BBox>)> {
    let (w0, h0) = sample_size(rng, cfg);
    let dir = uniform(rng, 0.0, 2.0 * PI);
    let mut bases: Vec<BBox> = Vec::with_capacity(members);
    for k in 0..members {
        let (w, h) = if k == 0 {
            (w0, h0)
        } else {
            (w0 * uniform(rng, 1.0 - SIZE_JITTER, 1.0 + SIZE_JITTER), h0 * uniform(rng, 1.0 - SIZE_JITTER, 1.0 + SIZE_JITTER))
        };
        let b = match bases.last() {
            None => BBox::new(0.0, 0.0, w, h).expect("positive size"),
            Some(prev) => place_neighbor(prev, w, h, dir + uniform(rng, -0.3, 0.3), cfg.crowding),
        };
        bases.push(b);
    }
    bases
        .into_iter()
        .map(|b| {
            let extras = (0..cfg.extra_classes)
                .map(|_| {
                    let t = (cfg.pair_iou_target + uniform(rng, -cfg.pair_iou_spread, cfg.pair_iou_spread)).min(1.0);
                    derive_extra(rng, &b, t, cfg.extra_shape)
                })
                .collect();
            (b, extras)
        })
        .collect()
}

fn cluster_sizes<R: Rng>(rng: &mut R, cfg: &SimConfig, groups: usize) -> Vec<usize> {
    if cfg.crowding == 0.0 {
        return vec![1; groups];
    }
    let mut sizes = Vec::new();
    let mut left = groups;
    while left > 0 {
        let k = rng.random_range(2..=cfg.cluster_max).min(left);
        sizes.push(k);
        left -= k;
    }
    // A trailing singleton joins the previous cluster so every group has a neighbor.
    if sizes.len() > 1 && *sizes.last().unwrap() == 1 {
        sizes.pop();
        *sizes.last_mut().unwrap() += 1;
    }
    sizes
}

fn generate_scene(cfg: &SimConfig, image: usize) -> SimScene {
    let mut rng = stream_rng(cfg.seed, image, Purpose::Scene);
    let n = rng.random_range(cfg.groups_min..=cfg.groups_max);
    let frame = (cfg.image_width, cfg.image_height);
    let mut occupied: Vec<BBox> = Vec::new();
    let mut groups = Vec::new();
    for size in cluster_sizes(&mut rng, cfg, n) {
        let cluster = build_cluster(&mut rng, cfg, size);
        let mut hull = cluster[0].0;
        for (b, extras) in &cluster {
            hull = hull.enclosing(b);
            for e in extras {
                hull = hull.enclosing(e);
            }
        }
        if hull.w() >= frame.0 || hull.h() >= frame.1 {
            continue;
        }
        for _ in 0..PLACEMENT_ATTEMPTS {
            let dx = uniform(&mut rng, 0.0, frame.0 - hull.w()) - hull.x();
            let dy = uniform(&mut rng, 0.0, frame.1 - hull.h()) - hull.y();
            let placed = BBox::new(hull.x() + dx, hull.y() + dy, hull.w(), hull.h()).expect("positive size");
            // Strict gap so boxes of different clusters never touch.
            let clear = occupied.iter().all(|o| {
                placed.right() + 1.0 < o.x() || o.right() + 1.0 < placed.x() || placed.bottom() + 1.0 < o.y() || o.bottom() + 1.0 < placed.y()
            });
            if !clear {
                continue;
            }
            occupied.push(placed);
            let shift = |b: &BBox| BBox::new(b.x() + dx, b.y() + dy, b.w(), b.h()).expect("positive size");
            for (b, extras) in &cluster {
                let group_id = groups.len() as u64;
                groups.push(GroupLabel::new(image as ImageId, group_id, 0, shift(b), extras.iter().map(|e| Some(shift(e))).collect()));
            }
            break;
        }
    }
    SimScene {
        image_id: image as ImageId,
        groups,
    }
}

/// Generates `cfg.images` ground-truth scenes.
pub fn generate_scenes(cfg: &SimConfig) -> Result<Vec<SimScene>> {
    cfg.validate()?;
    Ok((0..cfg.images).into_par_iter().map(|i| generate_scene(cfg, i)).collect())
}

/// The scenes as an evaluation dataset.
pub fn scenes_dataset(cfg: &SimConfig, scenes: &[SimScene]) -> GroupDataset {
    GroupDataset {
        header: cfg.header(),
        images: scenes.iter().map(|s| s.image_id).collect(),
        groups: scenes.iter().flat_map(|s| s.groups.iter().cloned()).collect(),
    }
}

/// Mean over groups of the largest base IoU with any other group of the same image.
pub fn realized_crowding(scenes: &[SimScene]) -> Option<f64> {
    let vals: Vec<f64> = scenes
        .iter()
        .flat_map(|s| {
            s.groups.iter().enumerate().map(|(i, g)| {
                s.groups
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, o)| iou(&g.base, &o.base))
                    .fold(0.0, f64::max)
            })
        })
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean IoU between each base box and its extras.
pub fn realized_pair_iou(scenes: &[SimScene]) -> Option<f64> {
    let vals: Vec<f64> = scenes
        .iter()
        .flat_map(|s| s.groups.iter())
        .flat_map(|g| g.extras.iter().flatten().map(move |e| iou(&g.base, e)))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

struct Noise {
    sigma: f64,
    normal: Normal<f64>,
}

impl Noise {
    fn new(sigma: f64) -> Self {
        Noise {
            sigma,
            normal: Normal::new(0.0, 1.0).expect("unit normal"),
        }
    }

    /// Perturbs each edge by Gaussian noise proportional to the box size.
    fn perturb<R: Rng>(&self, rng: &mut R, b: &BBox) -> BBox {
        if self.sigma == 0.0 {
            return *b;
        }
        let mut e = [0.0; 4];
        for v in &mut e {
            *v = self.normal.sample(rng) * self.sigma;
        }
        let x1 = b.x() + e[0] * b.w();
        let x2 = (b.right() + e[1] * b.w()).max(x1 + 0.05 * b.w());
        let y1 = b.y() + e[2] * b.h();
        let y2 = (b.bottom() + e[3] * b.h()).max(y1 + 0.05 * b.h());
        BBox::from_corners(x1, y1, x2, y2).expect("ordered corners")
    }

    fn score<R: Rng>(&self, rng: &mut R, quality: f64, score_sigma: f64) -> f64 {
        (quality + self.normal.sample(rng) * score_sigma).clamp(0.0, 1.0)
    }
}

fn poisson<R: Rng>(rng: &mut R, rate: f64) -> usize {
    if rate <= 0.0 {
        0
    } else {
        Poisson::new(rate).expect("positive rate").sample(rng) as usize
    }
}

fn random_group_shape<R: Rng>(rng: &mut R, cfg: &SimConfig) -> (BBox, Vec<BBox>) {
    let (w, h) = sample_size(rng, cfg);
    let x = uniform(rng, 0.0, (cfg.image_width - w).max(0.0));
    let y = uniform(rng, 0.0, (cfg.image_height - h).max(0.0));
    let base = BBox::new(x, y, w, h).expect("positive size");
    let extras = (0..cfg.extra_classes)
        .map(|_| {
            let t = (cfg.pair_iou_target + uniform(rng, -cfg.pair_iou_spread, cfg.pair_iou_spread)).min(1.0);
            derive_extra(rng, &base, t, cfg.extra_shape)
        })
        .collect();
    (base, extras)
}

fn simulate_independent(cfg: &SimConfig, scene: &SimScene, image: usize) -> SimDetections {
    let mut rng = stream_rng(cfg.seed, image, Purpose::Independent);
    let noise = Noise::new(cfg.loc_noise_sigma);
    let id = scene.image_id;
    let mut bases = Vec::new();
    let mut base_sources = Vec::new();
    let mut extras = vec![Vec::new(); cfg.extra_classes];
    let mut extra_sources = vec![Vec::new(); cfg.extra_classes];

    let emit = |rng: &mut ChaCha8Rng, gt: &BBox, class: ClassId, group: usize, out: &mut Vec<Detection>, src: &mut Vec<Source>| {
        if rng.random::<f64>() >= cfg.detect_prob {
            return;
        }
        let primary = noise.perturb(rng, gt);
        let mut boxes = vec![primary];
        for _ in 0..cfg.duplicates {
            boxes.push(noise.perturb(rng, &primary));
        }
        for (copy, b) in boxes.into_iter().enumerate() {
            let score = noise.score(rng, iou(&b, gt), cfg.score_sigma);
            out.push(Detection {
                image_id: id,
                class_id: class,
                score,
                bbox: b,
            });
            src.push(Source::Truth { group, copy });
        }
    };
    for (gi, g) in scene.groups.iter().enumerate() {
        emit(&mut rng, &g.base, g.class_id, gi, &mut bases, &mut base_sources);
        for (slot, e) in g.extras.iter().enumerate() {
            if let Some(e) = e {
                emit(&mut rng, e, g.class_id, gi, &mut extras[slot], &mut extra_sources[slot]);
            }
        }
    }
    for slot in 0..=cfg.extra_classes {
        for _ in 0..poisson(&mut rng, cfg.fp_rate) {
            let (base, ex) = random_group_shape(&mut rng, cfg);
            let bbox = if slot == 0 { base } else { ex[slot - 1] };
            let det = Detection {
                image_id: id,
                class_id: 0,
                score: uniform(&mut rng, 0.0, cfg.fp_score_max),
                bbox,
            };
            if slot == 0 {
                bases.push(det);
                base_sources.push(Source::FalsePositive);
            } else {
                extras[slot - 1].push(det);
                extra_sources[slot - 1].push(Source::FalsePositive);
            }
        }
    }
    SimDetections::Independent {
        bases,
        extras,
        base_sources,
        extra_sources,
    }
}

fn simulate_grouped(cfg: &SimConfig, scene: &SimScene, image: usize) -> SimDetections {
    let mut rng = stream_rng(cfg.seed, image, Purpose::Grouped);
    let noise = Noise::new(cfg.loc_noise_sigma);
    let id = scene.image_id;
    let mut groups = Vec::new();
    let mut sources = Vec::new();
    for (gi, g) in scene.groups.iter().enumerate() {
        if rng.random::<f64>() >= cfg.detect_prob {
            continue;
        }
        let base = noise.perturb(&mut rng, &g.base);
        let extras: Vec<Option<BBox>> = g.extras.iter().map(|e| e.map(|e| noise.perturb(&mut rng, &e))).collect();
        let mut members = vec![(base, extras)];
        for _ in 0..cfg.duplicates {
            let (b, ex) = &members[0];
            let dup = (noise.perturb(&mut rng, b), ex.iter().map(|e| e.map(|e| noise.perturb(&mut rng, &e))).collect());
            members.push(dup);
        }
        for (copy, (b, ex)) in members.into_iter().enumerate() {
            // One score per group, driven by the base box the proposal was matched to.
            let score = noise.score(&mut rng, iou(&b, &g.base), cfg.score_sigma);
            groups.push(GroupDetection {
                image_id: id,
                class_id: g.class_id,
                score,
                base: b,
                extras: ex,
            });
            sources.push(Source::Truth { group: gi, copy });
        }
    }
    for _ in 0..poisson(&mut rng, cfg.fp_rate) {
        let (base, ex) = random_group_shape(&mut rng, cfg);
        groups.push(GroupDetection {
            image_id: id,
            class_id: 0,
            score: uniform(&mut rng, 0.0, cfg.fp_score_max),
            base,
            extras: ex.into_iter().map(Some).collect(),
        });
        sources.push(Source::FalsePositive);
    }
    SimDetections::Grouped { groups, sources }
}

/// Simulates detector output for every scene.
pub fn simulate_detector(scenes: &[SimScene], cfg: &SimConfig, mode: DetectorMode) -> Vec<SimDetections> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| match mode {
            DetectorMode::Independent => simulate_independent(cfg, s, i),
            DetectorMode::Grouped => simulate_grouped(cfg, s, i),
        })
        .collect()
}

/// Baseline: per-class NMS on every class, then Hungarian pairing.
pub fn baseline_pipeline(dets: &[SimDetections], cfg: &SimConfig) -> Result<Vec<GroupDetection>> {
    let per_image: Vec<Result<Vec<GroupDetection>>> = dets
        .par_iter()
        .map(|d| {
            let SimDetections::Independent { bases, extras, .. } = d else {
                return Err(Error::InvalidArgument("baseline pipeline needs independent detections".into()));
            };
            let nms = |list: &[Detection]| -> Result<Vec<Detection>> {
                let flat: Vec<_> = list.iter().map(|d| (d.class_id, d.score, d.bbox)).collect();
                Ok(per_class_nms(&flat, cfg.nms_iou)?.into_iter().map(|i| list[i].clone()).collect())
            };
            let kept_bases = nms(bases)?;
            let kept_extras = extras.iter().map(|e| nms(e)).collect::<Result<Vec<_>>>()?;
            pair_slots(&kept_bases, &kept_extras, cfg.pair_iou_floor)
        })
        .collect();
    Ok(per_image.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

/// Grouped prediction: set NMS on the groups.
pub fn grouped_pipeline(dets: &[SimDetections], cfg: &SimConfig) -> Result<Vec<GroupDetection>> {
    let params = SuppressionParams::new(cfg.nms_iou, SuppressionMode::Set)?;
    let per_image: Vec<Result<Vec<GroupDetection>>> = dets
        .par_iter()
        .map(|d| {
            let SimDetections::Grouped { groups, .. } = d else {
                return Err(Error::InvalidArgument("grouped pipeline needs grouped detections".into()));
            };
            Ok(group_suppress(groups, &params)?.into_iter().map(|i| groups[i].clone()).collect())
        })
        .collect();
    Ok(per_image.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Independent detection, NMS per class and Hungarian pairing.
    Baseline,
    /// Grouped prediction with set NMS.
    Mp,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Baseline => "baseline",
            Pipeline::Mp => "mp",
        }
    }
}

/// One row of the experiment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub seed: u64,
    pub pipeline: Pipeline,
    pub ap_base: Option<f64>,
    pub ap_extra: Option<f64>,
    pub ap_match: Option<f64>,
    pub mr_base: Option<f64>,
    pub mr_extra: Option<f64>,
    pub mr_match: Option<f64>,
}

impl ExperimentRow {
    fn from_eval(seed: u64, pipeline: Pipeline, r: &EvalResult, arity: usize) -> Self {
        let mean = |f: &dyn Fn(usize) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = (0..arity).filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        ExperimentRow {
            seed,
            pipeline,
            ap_base: r.ap_base(),
            ap_extra: mean(&|s| r.ap_extra(s)),
            ap_match: r.ap_match(),
            mr_base: r.mr_base(),
            mr_extra: mean(&|s| r.mr_extra(s)),
            mr_match: r.mr_match(),
        }
    }

    pub fn metrics(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("ap_base", self.ap_base),
            ("ap_extra", self.ap_extra),
            ("ap_match", self.ap_match),
            ("mr_base", self.mr_base),
            ("mr_extra", self.mr_extra),
            ("mr_match", self.mr_match),
        ]
    }
}

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub stdev: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Some(Summary { mean, stdev: var.sqrt(), n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentReport {
    pub fn rows_for(&self, pipeline: Pipeline) -> impl Iterator<Item = &ExperimentRow> {
        self.rows.iter().filter(move |r| r.pipeline == pipeline)
    }

    pub fn summary(&self, pipeline: Pipeline, metric: &str) -> Option<Summary> {
        let vals: Vec<f64> = self
            .rows_for(pipeline)
            .filter_map(|r| r.metrics().iter().find(|(m, _)| *m == metric).and_then(|(_, v)| *v))
            .collect();
        Summary::of(&vals)
    }

    /// Per-seed `mp - baseline` differences of `metric`, in seed order.
    pub fn paired_gaps(&self, metric: &str) -> Vec<f64> {
        let get = |r: &ExperimentRow| r.metrics().iter().find(|(m, _)| *m == metric).and_then(|(_, v)| *v);
        self.rows_for(Pipeline::Baseline)
            .filter_map(|b| {
                let mp = self.rows_for(Pipeline::Mp).find(|m| m.seed == b.seed)?;
                Some(get(mp)? - get(b)?)
            })
            .collect()
    }
}

/// Evaluation of both pipelines on one seed.
pub struct SeedOutcome {
    pub seed: u64,
    pub baseline: EvalResult,
    pub mp: EvalResult,
}

pub fn run_seed(cfg: &SimConfig, seed: u64) -> Result<SeedOutcome> {
    let cfg = cfg.clone().with_seed(seed);
    let scenes = generate_scenes(&cfg)?;
    let gt = scenes_dataset(&cfg, &scenes);
    let independent = simulate_detector(&scenes, &cfg, DetectorMode::Independent);
    let grouped = simulate_detector(&scenes, &cfg, DetectorMode::Grouped);
    let baseline = evaluate(&gt, &baseline_pipeline(&independent, &cfg)?, cfg.eval_iou)?;
    let mp = evaluate(&gt, &grouped_pipeline(&grouped, &cfg)?, cfg.eval_iou)?;
    Ok(SeedOutcome { seed, baseline, mp })
}

/// Runs both pipelines for every seed; rows are ordered by seed, baseline first.
pub fn run_experiment(cfg: &SimConfig, seeds: &[u64]) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    cfg.validate()?;
    let outcomes: Vec<Result<SeedOutcome>> = seeds.par_iter().map(|&s| run_seed(cfg, s)).collect();
    let mut rows = Vec::with_capacity(2 * seeds.len());
    for o in outcomes {
        let o = o?;
        rows.push(ExperimentRow::from_eval(o.seed, Pipeline::Baseline, &o.baseline, cfg.extra_classes));
        rows.push(ExperimentRow::from_eval(o.seed, Pipeline::Mp, &o.mp, cfg.extra_classes));
    }
    Ok(ExperimentReport { rows })
}
