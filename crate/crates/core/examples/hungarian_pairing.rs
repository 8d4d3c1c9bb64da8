// Pair independently detected players and player+stick boxes.

use detmatch::association::{hungarian_assign, pair_by_iou};
use detmatch::{BBox, Detection};

fn det(class: u32, score: f64, b: [f64; 4]) -> Detection {
    Detection::new(0, class, score, BBox::new(b[0], b[1], b[2], b[3]).unwrap()).unwrap()
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
    let r = hungarian_assign(&cost, None)?;
    println!("assignment {:?}, total cost {}", r.pairs, r.total_cost);
    assert_eq!(r.total_cost, 5.0);

    let players = vec![
        det(0, 0.9, [100., 100., 40., 90.]),
        det(0, 0.8, [130., 100., 40., 90.]),
        det(0, 0.7, [400., 100., 40., 90.]),
    ];
    let sticks = vec![det(0, 0.6, [125., 100., 60., 100.]), det(0, 0.85, [80., 100., 62., 98.])];
    let groups = pair_by_iou(&players, &sticks, 0.0)?;
    for g in &groups {
        match g.extras[0] {
            Some(e) => println!("player {:?} paired with {:?}", g.base.to_array(), e.to_array()),
            None => println!("player {:?} has no partner", g.base.to_array()),
        }
    }
    assert_eq!(groups[0].extras[0], Some(sticks[1].bbox));
    assert_eq!(groups[2].extras[0], None);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
