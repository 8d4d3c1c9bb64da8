// Derive person+torso groups from COCO keypoint annotations.

use detmatch::coco::{convert_coco_value, DEFAULT_TORSO_MARGIN};
use detmatch::io::{groups_to_value, to_canonical_string};
use serde_json::json;

fn keypoints(points: &[(usize, f64, f64, u8)]) -> Vec<f64> {
    let mut kp = vec![0.0; 51];
    for &(k, x, y, v) in points {
        kp[3 * k] = x;
        kp[3 * k + 1] = y;
        kp[3 * k + 2] = f64::from(v);
    }
    kp
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let doc = json!({
        "images": [{"id": 7, "width": 640, "height": 480}],
        "categories": [{"id": 1, "name": "person"}],
        "annotations": [
            // Shoulders and hips visible.
            {"id": 1, "image_id": 7, "category_id": 1, "iscrowd": 0, "bbox": [100, 50, 80, 200],
             "keypoints": keypoints(&[(5, 115., 90., 2), (6, 165., 90., 2), (11, 120., 170., 2), (12, 160., 170., 1)])},
            // Only one shoulder labeled: kept without a torso box.
            {"id": 2, "image_id": 7, "category_id": 1, "iscrowd": 0, "bbox": [300, 60, 70, 180],
             "keypoints": keypoints(&[(5, 320., 100., 2)])},
            // No torso keypoints at all: dropped.
            {"id": 3, "image_id": 7, "category_id": 1, "iscrowd": 0, "bbox": [500, 60, 40, 90],
             "keypoints": keypoints(&[(0, 520., 70., 2)])},
        ],
    });
    let ds = convert_coco_value(doc, DEFAULT_TORSO_MARGIN)?;
    for g in &ds.groups {
        println!("person {} {:?} torso {:?}", g.group_id, g.base.to_array(), g.extras[0].map(|t| t.to_array()));
    }
    assert_eq!(ds.groups.len(), 2);
    assert!(ds.groups[1].extras[0].is_none());
    print!("{}", to_canonical_string(&groups_to_value(&ds)));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
