// Overlap density and stride assignment for the two simulator presets.

use detmatch::analysis::{assign_to_strides, overlap_histogram, AssignmentView, StrideSpec};
use detmatch::sim::{generate_scenes, SimConfig};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    for (name, cfg) in [("hockey", SimConfig::hockey()), ("torso", SimConfig::torso())] {
        let cfg = SimConfig { images: 60, ..cfg };
        let scenes = generate_scenes(&cfg)?;
        let gts: Vec<_> = scenes.into_iter().flat_map(|s| s.groups).collect();
        let hist = overlap_histogram(&gts, 10)?;
        let size = (cfg.image_width, cfg.image_height);
        let ind = assign_to_strides(&gts, &[], size, &StrideSpec::default(), AssignmentView::Independent)?;
        let shared = assign_to_strides(&gts, &[], size, &StrideSpec::default(), AssignmentView::BaseDriven)?;
        println!("{name}: mean base/extra IoU {:.3}, same stride {:.1}%", hist.mean, 100.0 * ind.same_stride_fraction);
        for c in &ind.per_stride_counts {
            println!("  stride {:>2} role {} : {:6.1} proposals/image (base-driven {:6.1})", c.stride, c.role, c.mean_matched, shared.count(c.stride, c.role));
        }
        let bars: String = hist.bins.iter().map(|&(_, _, d)| if d > 2.0 { '#' } else if d > 0.0 { '.' } else { ' ' }).collect();
        println!("  density |{bars}|");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
