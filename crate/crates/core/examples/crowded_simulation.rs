// Post-hoc Hungarian pairing against grouped prediction in crowded scenes.
//
// Pass a number of seeds as the first argument (default 5).

use detmatch::sim::{realized_crowding, generate_scenes, run_experiment, Pipeline, SimConfig};

fn seeds() -> u64 {
    std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5)
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    run_with(5, 60)
}

fn run_with(n: u64, images: usize) -> Result<(), Box<dyn std::error::Error>> {
    let seeds: Vec<u64> = (1..=n).collect();
    for (name, cfg) in [("hockey", SimConfig::hockey()), ("torso", SimConfig::torso())] {
        let cfg = SimConfig { images, ..cfg };
        let crowd = realized_crowding(&generate_scenes(&cfg)?).unwrap_or(0.0);
        let report = run_experiment(&cfg, &seeds)?;
        println!("{name} (crowding {crowd:.2}, {} seeds)", seeds.len());
        for metric in ["ap_base", "ap_extra", "ap_match", "mr_match"] {
            let b = report.summary(Pipeline::Baseline, metric).expect("metric defined");
            let m = report.summary(Pipeline::Mp, metric).expect("metric defined");
            println!("  {metric:<9} baseline {:.3} ± {:.3}   mp {:.3} ± {:.3}", b.mean, b.stdev, m.mean, m.stdev);
        }
        let gaps = report.paired_gaps("ap_match");
        let wins = gaps.iter().filter(|g| **g > 0.0).count();
        println!("  mp wins AP_match on {wins} of {} seeds", gaps.len());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_with(seeds(), 200)
}
