//! Detection and matching of related objects through grouped predictions.
//!
//! A *group* is a base box (a player, a person) plus `N` related boxes (the
//! player together with the stick, the torso) predicted from the same
//! proposal and sharing one class and one score. This crate provides:
//!
//! * [`geometry`]: boxes, IoU, the DIoU terms and offset application.
//! * [`losses`]: focal, DIoU and coverage-constraint losses with analytic
//!   gradients and a finite-difference checker.
//! * [`suppression`]: classical NMS and the base-only, joint and set
//!   variants for groups.
//! * [`association`]: Hungarian pairing of independently detected classes.
//! * [`metrics`]: AP, log-average miss rate and their group-matching forms.
//! * [`analysis`]: base/extra overlap density and stride assignment counts.
//! * [`sim`]: a crowded-scene simulator comparing post-hoc pairing with
//!   grouped prediction.
//! * [`io`] and [`coco`]: JSON formats and a COCO keypoints converter.
//! * [`cli`]: the `detmatch` command-line front end.

pub mod analysis;
pub mod association;
pub mod cli;
pub mod coco;
pub mod error;
pub mod geometry;
pub mod group;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod sim;
pub mod suppression;

pub use error::{Error, Result};
pub use geometry::{apply_offsets, diou_terms, iou, BBox, Offset};
pub use group::{ClassId, Detection, GroupDetection, GroupLabel, ImageId};
