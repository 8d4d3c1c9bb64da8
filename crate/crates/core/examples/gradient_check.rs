// Check analytic loss gradients against central differences.

use detmatch::losses::{finite_difference_check, LossConfig, LossKind};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = LossConfig::default();
    let points: [(LossKind, Vec<f64>); 4] = [
        (LossKind::Diou, vec![3.0, 4.0, 20.0, 18.0, 0.0, 0.0, 25.0, 25.0]),
        (LossKind::Diou, vec![40.0, 10.0, 12.0, 30.0, 0.0, 0.0, 25.0, 25.0]),
        (LossKind::Constraint, vec![1.5, -0.7, 9.0, 12.0, 0.0, 0.0, 10.0, 10.0]),
        (LossKind::Focal, vec![0.3, 1.0]),
    ];
    for (kind, point) in points {
        let r = finite_difference_check(kind, &point, 1e-5, &cfg)?;
        println!("{kind:?} at {point:?}: loss {:.6}, max relative error {:.2e}", r.value, r.max_rel_error);
        assert!(r.passes(1e-4));
    }

    // Edge-touching boxes are a kink of the DIoU loss and are flagged.
    let touching = finite_difference_check(LossKind::Diou, &[10.0, 0.0, 10.0, 10.0, 0.0, 0.0, 10.0, 10.0], 1e-5, &cfg)?;
    println!("touching boxes: kink = {:?}", touching.kink);
    assert!(touching.kink.is_some());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
