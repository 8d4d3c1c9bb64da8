// Compare per-class, base-only, joint and set suppression on a crowded pair.

use detmatch::suppression::{suppress, SuppressionMode, SuppressionParams};
use detmatch::{BBox, GroupDetection};

fn group(score: f64, base: [f64; 4], extra: [f64; 4]) -> GroupDetection {
    let b = BBox::new(base[0], base[1], base[2], base[3]).unwrap();
    let e = BBox::new(extra[0], extra[1], extra[2], extra[3]).unwrap();
    GroupDetection::new(0, 0, score, b, vec![e]).unwrap()
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    // Two players standing close together, each scored twice by the detector.
    // Their player boxes overlap heavily but the sticks point in opposite
    // directions, so their player+stick boxes barely overlap.
    let groups = vec![
        group(0.95, [100., 100., 40., 90.], [60., 100., 80., 100.]),
        group(0.90, [102., 101., 40., 90.], [62., 101., 80., 100.]),
        group(0.85, [112., 100., 40., 90.], [112., 100., 85., 100.]),
        group(0.60, [113., 102., 40., 90.], [113., 102., 85., 100.]),
    ];
    let mut kept_counts = Vec::new();
    for mode in [SuppressionMode::PerClass, SuppressionMode::BaseOnly, SuppressionMode::Joint, SuppressionMode::Set] {
        let kept = suppress(&groups, &SuppressionParams::new(0.5, mode)?)?;
        let scores: Vec<f64> = kept.iter().map(|g| g.score).collect();
        println!("{:<10} kept {} groups, scores {:?}", mode.name(), kept.len(), scores);
        kept_counts.push((mode, kept.len()));
    }
    // Only set NMS keeps one group per player.
    assert_eq!(kept_counts[3], (SuppressionMode::Set, 2));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
