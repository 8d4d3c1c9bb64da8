// Build a group from offsets and score it with the training objective.

use detmatch::losses::{group_loss_terms, GroupTarget, LossConfig};
use detmatch::{iou, BBox, GroupDetection, Offset};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    // A predicted player plus a player+stick box that reaches further left and down.
    let base = BBox::new(100.0, 80.0, 40.0, 90.0)?;
    let stick = Offset::new(-25.0, 0.0, 25.0, 15.0);
    let group = GroupDetection::from_offsets(0, 0, 0.87, base, &[stick])?;
    let extra = group.extras[0].expect("offset applied");
    println!("base  {:?}", base.to_array());
    println!("extra {:?}  iou(base, extra) = {:.3}", extra.to_array(), iou(&base, &extra));

    let target = GroupTarget {
        base: BBox::new(102.0, 78.0, 40.0, 92.0)?,
        extras: vec![Some(BBox::new(75.0, 78.0, 66.0, 107.0)?)],
        class_id: 0,
    };
    let terms = group_loss_terms(0.87, &base, &[stick], &target, &LossConfig::default())?;
    println!("focal      {:.5}", terms.classification);
    println!("diou base  {:.5}", terms.base_localization);
    println!("diou extra {:.5}", terms.extra_localization[0].unwrap_or(0.0));
    println!("constraint {:.5}", terms.constraint[0]);
    println!("total      {:.5}", terms.total());

    // An extra that uncovers the base is penalized by the constraint term.
    let shrunk = Offset::new(5.0, 0.0, -10.0, 0.0);
    let bad = group_loss_terms(0.87, &base, &[shrunk], &target, &LossConfig::default())?;
    println!("constraint for a shrunken extra {:.5}", bad.constraint[0]);
    assert!(bad.constraint[0] > terms.constraint[0]);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
