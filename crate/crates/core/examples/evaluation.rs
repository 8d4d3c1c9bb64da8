// Evaluate grouped detections, then save and reload both files.

use detmatch::io::{load_detections, load_groups, save_detections, save_groups, DatasetHeader, DetectionFile, GroupDataset, LoadOptions};
use detmatch::metrics::evaluate;
use detmatch::{BBox, GroupDetection, GroupLabel};

fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
    BBox::new(x, y, w, h).unwrap()
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut gt = GroupDataset::new(DatasetHeader::new(vec!["player".into()], vec!["player+stick".into()]));
    gt.images = vec![0, 1];
    gt.groups = vec![
        GroupLabel::new(0, 0, 0, b(100., 100., 40., 90.), vec![Some(b(70., 100., 70., 100.))]),
        GroupLabel::new(0, 1, 0, b(300., 120., 40., 90.), vec![Some(b(300., 120., 75., 100.))]),
        GroupLabel::new(1, 0, 0, b(50., 50., 40., 90.), vec![Some(b(50., 50., 40., 110.))]),
    ];
    let dets = vec![
        // Both boxes right.
        GroupDetection::new(0, 0, 0.9, b(101., 100., 40., 90.), vec![b(72., 100., 68., 100.)])?,
        // Player right, stick box attached to the wrong side.
        GroupDetection::new(0, 0, 0.8, b(300., 121., 40., 90.), vec![b(240., 121., 100., 100.)])?,
        GroupDetection::new(1, 0, 0.7, b(51., 52., 40., 90.), vec![b(50., 51., 40., 108.)])?,
        GroupDetection::new(1, 0, 0.3, b(500., 50., 40., 90.), vec![b(500., 50., 40., 100.)])?,
    ];
    let r = evaluate(&gt, &dets, 0.5)?;
    for m in r.per_class.iter().chain(&r.matching) {
        println!("{:<14} AP {:.4}  MR {:.4}", m.name, m.ap.unwrap_or(f64::NAN), m.mr.unwrap_or(f64::NAN));
    }
    assert!(r.ap_match().unwrap() <= r.ap_base().unwrap());

    let dir = tempfile::tempdir()?;
    let gt_path = dir.path().join("gt.json");
    let det_path = dir.path().join("dets.json");
    save_groups(&gt_path, &gt)?;
    save_detections(&det_path, &DetectionFile::grouped(Some(gt.header.clone()), dets.clone()))?;
    let gt_back = load_groups(&gt_path, LoadOptions::strict())?;
    let dets_back = load_detections(&det_path, LoadOptions::strict())?.into_grouped()?;
    assert_eq!(gt_back, gt);
    assert_eq!(dets_back, dets);
    println!("files round-trip: {}", std::fs::read_to_string(&gt_path)?.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
