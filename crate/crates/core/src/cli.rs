//! The `detmatch` command line.
//!
//! Every subcommand reads and writes the JSON and CSV formats of
//! [`crate::io`]. Errors map to exit codes through [`Error::exit_code`];
//! argument errors exit with 1.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{assign_to_strides, overlap_histogram, AssignmentView, StrideSpec};
use crate::association::pair_slots;
use crate::coco::{convert_coco_torso, DEFAULT_TORSO_MARGIN};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::group::{Detection, GroupDetection};
use crate::io::{
    by_image, load_detections, load_groups, save_detections, save_groups, to_canonical_string, DetectionFile,
    DetectionSet, LoadOptions,
};
use crate::losses::{finite_difference_check, LossConfig, LossKind};
use crate::metrics::{evaluate, ClassMetrics};
use crate::sim::{run_experiment, Pipeline, Preset, SimConfig};
use crate::suppression::{per_class_nms, suppress, SuppressionMode, SuppressionParams};

#[derive(Debug, Parser)]
#[command(name = "detmatch", version, about = "Grouped detection post-processing and evaluation")]
pub struct Cli {
    /// Reject unknown fields in input files.
    #[arg(long, global = true)]
    pub strict: bool,
    /// Seed for commands that draw random numbers.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Suppress duplicate detections.
    Nms(NmsArgs),
    /// Pair base and extra detections with the Hungarian algorithm.
    Match(MatchArgs),
    /// Evaluate detections against ground truth.
    Eval(EvalArgs),
    /// Ground-truth statistics.
    Analyze(AnalyzeArgs),
    /// Run the crowded-scene experiment.
    Simulate(SimulateArgs),
    /// Convert COCO person keypoints to person+torso groups.
    Convert(ConvertArgs),
    /// Loss function utilities.
    Loss {
        #[command(subcommand)]
        command: LossCommand,
    },
    /// Time every NMS mode on synthetic groups.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct NmsArgs {
    #[arg(long, value_enum)]
    pub mode: SuppressionMode,
    #[arg(long = "iou", default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Flat detections file per extra slot, in slot order.
    #[arg(long, required = true, num_args = 1..)]
    pub extra: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub iou_floor: f64,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub dets: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub thr: f64,
    /// Report JSON; printed to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AnalysisKind {
    Overlap,
    Strides,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(value_enum)]
    pub kind: AnalysisKind,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Histogram bins over [0, 1].
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Image size as WIDTHxHEIGHT.
    #[arg(long, default_value = "1280x720", value_parser = parse_size)]
    pub image_size: (f64, f64),
    #[arg(long, value_enum, default_value = "independent")]
    pub view: ViewArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ViewArg {
    Independent,
    BaseDriven,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Flat TOML table overriding preset values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "hockey")]
    pub preset: Preset,
    /// `A..B` (inclusive), a comma list, or one seed. Defaults to `--seed` or 1..20.
    #[arg(long, value_parser = parse_seed_list)]
    pub seeds: Option<SeedList>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// COCO keypoints annotation file.
    #[arg(long)]
    pub coco: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Torso padding as a fraction of the keypoint hull, per side.
    #[arg(long, default_value_t = DEFAULT_TORSO_MARGIN)]
    pub margin: f64,
}

#[derive(Debug, Subcommand)]
pub enum LossCommand {
    /// Compare analytic gradients with central differences.
    CheckGradients(GradientArgs),
}

#[derive(Debug, Args)]
pub struct GradientArgs {
    #[arg(long, value_enum)]
    pub loss: LossKind,
    /// Comma-separated point; random smooth points are drawn when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub point: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Random points to check when `--point` is omitted.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 100)]
    pub images: usize,
    #[arg(long, default_value_t = 100)]
    pub groups_per_image: usize,
    #[arg(long, default_value_t = 2)]
    pub extras: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long = "iou", default_value_t = 0.5)]
    pub iou: f64,
}

fn parse_size(s: &str) -> std::result::Result<(f64, f64), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w: f64 = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    let h: f64 = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    if w > 0.0 && h > 0.0 {
        Ok((w, h))
    } else {
        Err("image size must be positive".into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

fn parse_seed_list(s: &str) -> std::result::Result<SeedList, String> {
    parse_seeds(s).map(SeedList)
}

/// Parses `A..B` (inclusive), `A,B,C` or `A`.
pub fn parse_seeds(s: &str) -> std::result::Result<Vec<u64>, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("bad seed {t:?}: {e}"));
    let seeds = if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b) = (num(a)?, num(b)?);
        if a > b {
            return Err(format!("empty seed range {s}"));
        }
        (a..=b).collect()
    } else {
        s.split(',').map(num).collect::<std::result::Result<Vec<_>, _>>()?
    };
    if seeds.is_empty() {
        Err("no seeds given".into())
    } else {
        Ok(seeds)
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be at least 1".into()));
        }
        // A second initialization in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let opts = LoadOptions { strict: cli.strict };
    match cli.command {
        Command::Nms(a) => cmd_nms(a, opts),
        Command::Match(a) => cmd_match(a, opts),
        Command::Eval(a) => cmd_eval(a, opts),
        Command::Analyze(a) => cmd_analyze(a, opts),
        Command::Simulate(a) => cmd_simulate(a, cli.seed),
        Command::Convert(a) => cmd_convert(a),
        Command::Loss {
            command: LossCommand::CheckGradients(a),
        } => cmd_check_gradients(a, cli.seed.unwrap_or(0)),
        Command::Bench(a) => cmd_bench(a, cli.seed.unwrap_or(0)),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_nms(a: NmsArgs, opts: LoadOptions) -> Result<()> {
    let file = load_detections(&a.input, opts)?;
    let params = SuppressionParams::new(a.iou, a.mode)?;
    let out = match file.detections {
        DetectionSet::Grouped(groups) => DetectionFile::grouped(file.header, suppress(&groups, &params)?),
        DetectionSet::Flat(dets) => {
            if a.mode != SuppressionMode::PerClass {
                return Err(Error::InvalidArgument(format!(
                    "mode {} needs grouped detections; flat input supports per-class only",
                    a.mode.name()
                )));
            }
            let mut kept = Vec::new();
            for (_, image) in by_image(&dets, |d| d.image_id) {
                let boxes: Vec<_> = image.iter().map(|d| (d.class_id, d.score, d.bbox)).collect();
                kept.extend(per_class_nms(&boxes, a.iou)?.into_iter().map(|i| image[i].clone()));
            }
            DetectionFile::flat(file.header, kept)
        }
    };
    save_detections(&a.output, &out)
}

fn cmd_match(a: MatchArgs, opts: LoadOptions) -> Result<()> {
    let base = load_detections(&a.base, opts)?;
    let header = base.header.clone();
    let bases = base.into_flat()?;
    let slots = a
        .extra
        .iter()
        .map(|p| load_detections(p, opts)?.into_flat())
        .collect::<Result<Vec<Vec<Detection>>>>()?;
    if let Some(h) = &header {
        if h.arity() != slots.len() {
            return Err(Error::ArityMismatch {
                expected: h.arity(),
                found: slots.len(),
                context: "number of --extra files".into(),
            });
        }
    }
    let groups = pair_slots(&bases, &slots, a.iou_floor)?;
    save_detections(&a.output, &DetectionFile::grouped(header, groups))
}

#[derive(Serialize)]
struct CurveRow<'a> {
    kind: &'static str,
    class_or_match: &'a str,
    x: f64,
    y: f64,
}

fn write_curves(path: &Path, metrics: &[&ClassMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in metrics {
        for &(x, y) in &m.pr_curve {
            w.serialize(CurveRow { kind: "pr", class_or_match: &m.name, x, y })?;
        }
    }
    for m in metrics {
        for &(x, y) in &m.fppi_curve {
            w.serialize(CurveRow { kind: "fppi", class_or_match: &m.name, x, y })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_eval(a: EvalArgs, opts: LoadOptions) -> Result<()> {
    let gt = load_groups(&a.gt, opts)?;
    let dets = load_detections(&a.dets, opts)?.into_grouped()?;
    let result = evaluate(&gt, &dets, a.thr)?;
    let summary = |m: &ClassMetrics| {
        json!({
            "name": m.name, "class_id": m.class_id, "role": m.role,
            "num_gt": m.num_gt, "num_dets": m.num_dets, "ap": m.ap, "mr": m.mr,
        })
    };
    let report = json!({
        "iou_threshold": result.iou_threshold,
        "num_images": result.num_images,
        "per_class": result.per_class.iter().map(summary).collect::<Vec<Value>>(),
        "matching": result.matching.iter().map(summary).collect::<Vec<Value>>(),
        "ap_base": result.ap_base(),
        "ap_match": result.ap_match(),
        "mr_base": result.mr_base(),
        "mr_match": result.mr_match(),
    });
    let text = to_canonical_string(&report);
    match &a.report {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    if let Some(p) = &a.curves {
        let all: Vec<&ClassMetrics> = result.per_class.iter().chain(&result.matching).collect();
        write_curves(p, &all)?;
    }
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs, opts: LoadOptions) -> Result<()> {
    let gt = load_groups(&a.gt, opts)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    let summary = match a.kind {
        AnalysisKind::Overlap => {
            let h = overlap_histogram(&gt.groups, a.bins)?;
            w.write_record(["lo", "hi", "density"])?;
            for (lo, hi, d) in &h.bins {
                w.serialize((lo, hi, d))?;
            }
            json!({"mean": h.mean, "count": h.count})
        }
        AnalysisKind::Strides => {
            let view = match a.view {
                ViewArg::Independent => AssignmentView::Independent,
                ViewArg::BaseDriven => AssignmentView::BaseDriven,
            };
            let r = assign_to_strides(&gt.groups, &gt.images, a.image_size, &StrideSpec::default(), view)?;
            w.write_record(["stride", "role", "mean_matched"])?;
            for c in &r.per_stride_counts {
                let role = if c.role == 0 {
                    gt.header.base_class_names.join("/")
                } else {
                    gt.header.extra_class_names[c.role - 1].clone()
                };
                w.serialize((c.stride, role, c.mean_matched))?;
            }
            json!({
                "same_stride_fraction": r.same_stride_fraction,
                "num_images": r.num_images,
                "num_pairs": r.num_pairs,
            })
        }
    };
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    print!("{}", to_canonical_string(&summary));
    Ok(())
}

/// Preset values overridden by the keys of a TOML table.
pub fn load_sim_config(preset: Preset, config: Option<&Path>) -> Result<SimConfig> {
    let base = preset.config();
    let Some(path) = config else { return Ok(base) };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let overrides: toml::Table =
        toml::from_str(&text).map_err(|e| Error::validation(path.display().to_string(), e.to_string()))?;
    let mut table = toml::Table::try_from(&base).map_err(|e| Error::Invariant(e.to_string()))?;
    for (k, v) in overrides {
        table.insert(k, v);
    }
    let cfg: SimConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::validation(path.display().to_string(), e.to_string()))?;
    Ok(cfg)
}

fn cmd_simulate(a: SimulateArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_sim_config(a.preset, a.config.as_deref())?;
    let seeds = a.seeds.map(|s| s.0).unwrap_or_else(|| match seed {
        Some(s) => vec![s],
        None => (1..=20).collect(),
    });
    let report = run_experiment(&cfg, &seeds)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;

    let mut summary = serde_json::Map::new();
    for p in [Pipeline::Baseline, Pipeline::Mp] {
        let mut m = serde_json::Map::new();
        for metric in ["ap_base", "ap_extra", "ap_match", "mr_base", "mr_extra", "mr_match"] {
            m.insert(metric.into(), serde_json::to_value(report.summary(p, metric))?);
        }
        summary.insert(p.name().into(), Value::Object(m));
    }
    print!("{}", to_canonical_string(&Value::Object(summary)));
    Ok(())
}

fn cmd_convert(a: ConvertArgs) -> Result<()> {
    let ds = convert_coco_torso(&a.coco, a.margin)?;
    save_groups(&a.output, &ds)
}

/// Random non-degenerate point for `kind`; kinks are reported by the check.
fn random_point(kind: LossKind, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let bx = |rng: &mut ChaCha8Rng| {
        [
            rng.random_range(0.0..100.0),
            rng.random_range(0.0..100.0),
            rng.random_range(5.0..60.0),
            rng.random_range(5.0..60.0),
        ]
    };
    match kind {
        LossKind::Diou | LossKind::Constraint => {
            let (a, b) = (bx(rng), bx(rng));
            a.into_iter().chain(b).collect()
        }
        LossKind::Focal => vec![rng.random_range(-8.0..8.0), f64::from(rng.random_range(0..2u8))],
    }
}

fn cmd_check_gradients(a: GradientArgs, seed: u64) -> Result<()> {
    let cfg = LossConfig::default();
    let reports = match &a.point {
        Some(p) => vec![finite_difference_check(a.loss, p, a.epsilon, &cfg)?],
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..a.samples)
                .map(|_| finite_difference_check(a.loss, &random_point(a.loss, &mut rng), a.epsilon, &cfg))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let checked: Vec<_> = reports.iter().filter(|r| r.kink.is_none()).collect();
    let failures = checked.iter().filter(|r| !r.passes(a.tol)).count();
    let max_rel = checked.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let doc = json!({
        "loss": a.loss,
        "epsilon": a.epsilon,
        "tolerance": a.tol,
        "points": reports.len(),
        "kinks_skipped": reports.len() - checked.len(),
        "failures": failures,
        "max_rel_error": max_rel,
        "passed": failures == 0,
        "reports": reports,
    });
    let text = to_canonical_string(&doc);
    match &a.output {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    if failures > 0 {
        return Err(Error::Invariant(format!(
            "{failures} point(s) exceed relative error {} (max {max_rel:e})",
            a.tol
        )));
    }
    Ok(())
}

/// Random groups clustered around a few centers per image.
pub fn bench_groups(images: usize, per_image: usize, extras: usize, seed: u64) -> Vec<GroupDetection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(images * per_image);
    for image in 0..images {
        let centers: Vec<(f64, f64)> = (0..(per_image / 8).max(1))
            .map(|_| (rng.random_range(50.0..1230.0), rng.random_range(50.0..670.0)))
            .collect();
        for _ in 0..per_image {
            let (cx, cy) = centers[rng.random_range(0..centers.len())];
            let jitter = |s: f64, rng: &mut ChaCha8Rng| {
                let w = s * rng.random_range(0.8..1.2);
                let h = s * rng.random_range(1.2..2.4);
                BBox::new(
                    (cx - w / 2.0 + rng.random_range(-10.0..10.0)).max(0.0),
                    (cy - h / 2.0 + rng.random_range(-10.0..10.0)).max(0.0),
                    w,
                    h,
                )
                .expect("positive size")
            };
            let base = jitter(40.0, &mut rng);
            let ex = (0..extras).map(|_| Some(jitter(rng.random_range(30.0..60.0), &mut rng))).collect();
            out.push(GroupDetection {
                image_id: image as u64,
                class_id: 0,
                score: rng.random_range(0.0..1.0),
                base,
                extras: ex,
            });
        }
    }
    out
}

fn cmd_bench(a: BenchArgs, seed: u64) -> Result<()> {
    if a.repeats == 0 {
        return Err(Error::InvalidArgument("--repeats must be at least 1".into()));
    }
    let groups = bench_groups(a.images, a.groups_per_image, a.extras, seed);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for mode in [SuppressionMode::PerClass].into_iter().chain(SuppressionMode::GROUP_MODES) {
        let params = SuppressionParams::new(a.iou, mode)?;
        let start = Instant::now();
        let mut kept = 0;
        for _ in 0..a.repeats {
            kept = suppress(&groups, &params)?.len();
        }
        let secs = start.elapsed().as_secs_f64();
        let rate = (groups.len() * a.repeats) as f64 / secs.max(1e-12);
        writeln!(out, "{:<10} {:>8} groups  {:>8} kept  {:>14.0} groups/second", mode.name(), groups.len(), kept, rate)
            .map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}
