//! JSON file formats for ground-truth groups and detections.
//!
//! Documents are written canonically: object keys sorted, floats in their
//! shortest round-trip representation, one compact document followed by a
//! newline. Loading a file written by this module and saving it again
//! reproduces the same bytes.
//!
//! Ground-truth groups:
//!
//! ```json
//! {"format":"detmatch-groups",
//!  "groups":[{"base":[x,y,w,h],"class_id":0,"extras":[[x,y,w,h] | null],
//!             "group_id":1,"ignore":false,"image_id":7}],
//!  "header":{"base_class_names":["player"],"extra_class_names":["player+stick"],"schema_version":1},
//!  "images":[7]}
//! ```
//!
//! Detections come in two kinds sharing one envelope, `grouped` records
//! (`base`, `extras`) and `flat` per-class records (`bbox`):
//!
//! ```json
//! {"format":"detmatch-detections","kind":"grouped","header":{...} | null,
//!  "detections":[{"base":[...],"class_id":0,"extras":[[...]],"image_id":7,"score":0.93}]}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::group::{check_score, Detection, GroupDetection, GroupLabel, ImageId};

pub const SCHEMA_VERSION: u32 = 1;
pub const GROUPS_FORMAT: &str = "detmatch-groups";
pub const DETECTIONS_FORMAT: &str = "detmatch-detections";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub base_class_names: Vec<String>,
    pub extra_class_names: Vec<String>,
}

impl DatasetHeader {
    pub fn new(base_class_names: Vec<String>, extra_class_names: Vec<String>) -> Self {
        DatasetHeader {
            schema_version: SCHEMA_VERSION,
            base_class_names,
            extra_class_names,
        }
    }

    pub fn arity(&self) -> usize {
        self.extra_class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::validation(
                "header.schema_version",
                format!("unsupported version {}", self.schema_version),
            ));
        }
        if self.base_class_names.is_empty() {
            return Err(Error::validation("header.base_class_names", "at least one base class is required"));
        }
        for (field, names) in [("base_class_names", &self.base_class_names), ("extra_class_names", &self.extra_class_names)] {
            if let Some(i) = names.iter().position(|n| n.is_empty()) {
                return Err(Error::validation(format!("header.{field}[{i}]"), "empty class name"));
            }
        }
        Ok(())
    }
}

/// A ground-truth dataset: header, the list of images (including images
/// without any group) and the annotated groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDataset {
    pub header: DatasetHeader,
    pub images: Vec<ImageId>,
    pub groups: Vec<GroupLabel>,
}

impl GroupDataset {
    pub fn new(header: DatasetHeader) -> Self {
        GroupDataset {
            header,
            images: Vec::new(),
            groups: Vec::new(),
        }
    }

    /// Checks arity, class ids and `(image_id, group_id)` uniqueness.
    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        let arity = self.header.arity();
        let mut seen = BTreeSet::new();
        for (i, g) in self.groups.iter().enumerate() {
            let loc = || format!("groups[{i}] (image_id {}, group_id {})", g.image_id, g.group_id);
            if g.extras.len() != arity {
                return Err(Error::validation(
                    loc(),
                    format!("extras arity {} differs from the header's {arity}", g.extras.len()),
                ));
            }
            if g.class_id as usize >= self.header.base_class_names.len() {
                return Err(Error::validation(loc(), format!("class_id {} has no base class name", g.class_id)));
            }
            if !seen.insert((g.image_id, g.group_id)) {
                return Err(Error::validation(loc(), "duplicate (image_id, group_id)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoadOptions {
    /// Reject fields outside the schema instead of preserving them.
    pub strict: bool,
}

impl LoadOptions {
    pub fn strict() -> Self {
        LoadOptions { strict: true }
    }
}

const GROUP_FIELDS: &[&str] = &["image_id", "group_id", "class_id", "base", "extras", "ignore"];
const GROUPED_DET_FIELDS: &[&str] = &["image_id", "class_id", "score", "base", "extras"];
const FLAT_DET_FIELDS: &[&str] = &["image_id", "class_id", "score", "bbox"];

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })
}

fn write_canonical(path: &Path, doc: &Value) -> Result<()> {
    fs::write(path, to_canonical_string(doc)).map_err(|e| Error::io(path, e))
}

/// Compact JSON with sorted keys and a trailing newline.
pub fn to_canonical_string(doc: &Value) -> String {
    // serde_json's default map is ordered by key.
    let mut s = doc.to_string();
    s.push('\n');
    s
}

fn take_object(v: Value, location: &str) -> Result<Map<String, Value>> {
    match v {
        Value::Object(m) => Ok(m),
        other => Err(Error::validation(location, format!("expected an object, found {other}"))),
    }
}

fn reject_unknown(obj: &Map<String, Value>, allowed: &[&str], location: &str) -> Result<()> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::validation(location, format!("unknown field `{k}`"))),
        None => Ok(()),
    }
}

fn check_format(obj: &Map<String, Value>, expected: &str) -> Result<()> {
    match obj.get("format").and_then(Value::as_str) {
        Some(f) if f == expected => Ok(()),
        Some(f) => Err(Error::validation("format", format!("expected `{expected}`, found `{f}`"))),
        None => Err(Error::validation("format", format!("missing `format` tag (`{expected}`)"))),
    }
}

fn field<T: serde::de::DeserializeOwned>(obj: &mut Map<String, Value>, key: &str, location: &str) -> Result<T> {
    let v = obj
        .remove(key)
        .ok_or_else(|| Error::validation(location, format!("missing field `{key}`")))?;
    serde_json::from_value(v).map_err(|e| Error::validation(format!("{location}.{key}"), e.to_string()))
}

/// Parses a groups document from a JSON value.
pub fn groups_from_value(doc: Value, opts: LoadOptions) -> Result<GroupDataset> {
    let mut top = take_object(doc, "document")?;
    check_format(&top, GROUPS_FORMAT)?;
    if opts.strict {
        reject_unknown(&top, &["format", "header", "images", "groups"], "document")?;
    }
    let header_obj = take_object(
        top.remove("header").ok_or_else(|| Error::validation("document", "missing field `header`"))?,
        "header",
    )?;
    if opts.strict {
        reject_unknown(&header_obj, &["schema_version", "base_class_names", "extra_class_names"], "header")?;
    }
    let header: DatasetHeader =
        serde_json::from_value(Value::Object(header_obj)).map_err(|e| Error::validation("header", e.to_string()))?;
    let images: Vec<ImageId> = match top.remove("images") {
        Some(v) => serde_json::from_value(v).map_err(|e| Error::validation("images", e.to_string()))?,
        None => Vec::new(),
    };
    let records: Vec<Value> = field(&mut top, "groups", "document")?;
    let mut groups = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        let location = format!("groups[{i}]");
        let obj = take_object(rec, &location)?;
        if opts.strict {
            reject_unknown(&obj, GROUP_FIELDS, &location)?;
        }
        let g: GroupLabel =
            serde_json::from_value(Value::Object(obj)).map_err(|e| Error::validation(&location, e.to_string()))?;
        groups.push(g);
    }
    let ds = GroupDataset { header, images, groups };
    ds.validate()?;
    Ok(ds)
}

pub fn groups_to_value(ds: &GroupDataset) -> Value {
    let mut top = Map::new();
    top.insert("format".into(), Value::from(GROUPS_FORMAT));
    top.insert("header".into(), serde_json::to_value(&ds.header).expect("header serializes"));
    top.insert("images".into(), serde_json::to_value(&ds.images).expect("ids serialize"));
    top.insert("groups".into(), serde_json::to_value(&ds.groups).expect("groups serialize"));
    Value::Object(top)
}

pub fn load_groups(path: impl AsRef<Path>, opts: LoadOptions) -> Result<GroupDataset> {
    groups_from_value(read_json(path.as_ref())?, opts)
}

pub fn save_groups(path: impl AsRef<Path>, ds: &GroupDataset) -> Result<()> {
    ds.validate()?;
    write_canonical(path.as_ref(), &groups_to_value(ds))
}

/// Contents of a detections file.
#[derive(Debug, Clone, PartialEq)]
pub enum DetectionSet {
    Grouped(Vec<GroupDetection>),
    Flat(Vec<Detection>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFile {
    pub header: Option<DatasetHeader>,
    pub detections: DetectionSet,
}

impl DetectionFile {
    pub fn grouped(header: Option<DatasetHeader>, dets: Vec<GroupDetection>) -> Self {
        DetectionFile {
            header,
            detections: DetectionSet::Grouped(dets),
        }
    }

    pub fn flat(header: Option<DatasetHeader>, dets: Vec<Detection>) -> Self {
        DetectionFile {
            header,
            detections: DetectionSet::Flat(dets),
        }
    }

    pub fn into_grouped(self) -> Result<Vec<GroupDetection>> {
        match self.detections {
            DetectionSet::Grouped(d) => Ok(d),
            DetectionSet::Flat(_) => Err(Error::validation("kind", "expected grouped detections, found flat")),
        }
    }

    pub fn into_flat(self) -> Result<Vec<Detection>> {
        match self.detections {
            DetectionSet::Flat(d) => Ok(d),
            DetectionSet::Grouped(_) => Err(Error::validation("kind", "expected flat detections, found grouped")),
        }
    }
}

pub fn detections_from_value(doc: Value, opts: LoadOptions) -> Result<DetectionFile> {
    let mut top = take_object(doc, "document")?;
    check_format(&top, DETECTIONS_FORMAT)?;
    if opts.strict {
        reject_unknown(&top, &["format", "kind", "header", "detections"], "document")?;
    }
    let kind: String = field(&mut top, "kind", "document")?;
    let header: Option<DatasetHeader> = match top.remove("header") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let obj = take_object(v, "header")?;
            if opts.strict {
                reject_unknown(&obj, &["schema_version", "base_class_names", "extra_class_names"], "header")?;
            }
            let h: DatasetHeader =
                serde_json::from_value(Value::Object(obj)).map_err(|e| Error::validation("header", e.to_string()))?;
            h.validate()?;
            Some(h)
        }
    };
    let records: Vec<Value> = field(&mut top, "detections", "document")?;
    let allowed = match kind.as_str() {
        "grouped" => GROUPED_DET_FIELDS,
        "flat" => FLAT_DET_FIELDS,
        other => return Err(Error::validation("kind", format!("unknown detection kind `{other}`"))),
    };
    let mut objects = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        let location = format!("detections[{i}]");
        let mut obj = take_object(rec, &location)?;
        if opts.strict {
            reject_unknown(&obj, allowed, &location)?;
        } else {
            obj.retain(|k, _| allowed.contains(&k.as_str()));
        }
        let score = obj.get("score").and_then(Value::as_f64);
        if let Some(s) = score {
            check_score(s).map_err(|e| Error::validation(&location, e.to_string()))?;
        }
        objects.push((location, Value::Object(obj)));
    }
    let detections = if kind == "grouped" {
        let mut dets = Vec::with_capacity(objects.len());
        for (location, v) in objects {
            let d: GroupDetection = serde_json::from_value(v).map_err(|e| Error::validation(&location, e.to_string()))?;
            dets.push(d);
        }
        let expected = header.as_ref().map(DatasetHeader::arity).or_else(|| dets.first().map(GroupDetection::arity));
        if let Some(n) = expected {
            if let Some(i) = dets.iter().position(|d| d.arity() != n) {
                return Err(Error::validation(
                    format!("detections[{i}]"),
                    format!("extras arity {} differs from {n}", dets[i].arity()),
                ));
            }
        }
        DetectionSet::Grouped(dets)
    } else {
        let mut dets = Vec::with_capacity(objects.len());
        for (location, v) in objects {
            let d: Detection = serde_json::from_value(v).map_err(|e| Error::validation(&location, e.to_string()))?;
            dets.push(d);
        }
        DetectionSet::Flat(dets)
    };
    Ok(DetectionFile { header, detections })
}

pub fn detections_to_value(file: &DetectionFile) -> Value {
    let mut top = Map::new();
    top.insert("format".into(), Value::from(DETECTIONS_FORMAT));
    top.insert(
        "header".into(),
        file.header
            .as_ref()
            .map_or(Value::Null, |h| serde_json::to_value(h).expect("header serializes")),
    );
    let (kind, dets) = match &file.detections {
        DetectionSet::Grouped(d) => ("grouped", serde_json::to_value(d)),
        DetectionSet::Flat(d) => ("flat", serde_json::to_value(d)),
    };
    top.insert("kind".into(), Value::from(kind));
    top.insert("detections".into(), dets.expect("detections serialize"));
    Value::Object(top)
}

pub fn load_detections(path: impl AsRef<Path>, opts: LoadOptions) -> Result<DetectionFile> {
    detections_from_value(read_json(path.as_ref())?, opts)
}

pub fn save_detections(path: impl AsRef<Path>, file: &DetectionFile) -> Result<()> {
    let scores: Vec<f64> = match &file.detections {
        DetectionSet::Grouped(d) => d.iter().map(|d| d.score).collect(),
        DetectionSet::Flat(d) => d.iter().map(|d| d.score).collect(),
    };
    for (i, s) in scores.into_iter().enumerate() {
        check_score(s).map_err(|e| Error::validation(format!("detections[{i}]"), e.to_string()))?;
    }
    write_canonical(path.as_ref(), &detections_to_value(file))
}

/// Splits grouped detections into per-slot flat lists (base first), as an
/// independent per-class detector would report them.
pub fn flatten_groups(groups: &[GroupDetection]) -> (Vec<Detection>, Vec<Vec<Detection>>) {
    let arity = groups.first().map_or(0, GroupDetection::arity);
    let bases = groups
        .iter()
        .map(|g| Detection {
            image_id: g.image_id,
            class_id: g.class_id,
            score: g.score,
            bbox: g.base,
        })
        .collect();
    let slots = (0..arity)
        .map(|slot| {
            groups
                .iter()
                .filter_map(|g| {
                    g.extras[slot].map(|bbox| Detection {
                        image_id: g.image_id,
                        class_id: g.class_id,
                        score: g.score,
                        bbox,
                    })
                })
                .collect()
        })
        .collect();
    (bases, slots)
}

/// Groups records by image id, preserving order within an image.
pub fn by_image<T, F: Fn(&T) -> ImageId>(items: &[T], key: F) -> BTreeMap<ImageId, Vec<&T>> {
    let mut out: BTreeMap<ImageId, Vec<&T>> = BTreeMap::new();
    for it in items {
        out.entry(key(it)).or_default().push(it);
    }
    out
}
