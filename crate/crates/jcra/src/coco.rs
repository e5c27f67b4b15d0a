//! COCO keypoint ground-truth and result files.

use std::collections::BTreeSet;
use std::path::Path;

use jcra_core::metrics::{DtInstance, GtInstance};
use jcra_core::synth::{Scene, Skeleton};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::{read, Error, Result};
use crate::json::to_canonical;

pub const PERSON_CATEGORY: u64 = 1;

#[derive(Deserialize)]
struct GtFile {
    images: Vec<ImageRecord>,
    annotations: Vec<AnnotationRecord>,
}

#[derive(Deserialize)]
struct ImageRecord {
    id: u64,
}

#[derive(Deserialize)]
struct AnnotationRecord {
    image_id: u64,
    keypoints: Vec<f64>,
    area: f64,
    iscrowd: u8,
}

#[derive(Deserialize)]
struct ResultRecord {
    image_id: u64,
    category_id: u64,
    keypoints: Vec<f64>,
    score: f64,
}

/// Parsed ground-truth file.
#[derive(Debug, Clone, PartialEq)]
pub struct GtSet {
    pub image_ids: BTreeSet<u64>,
    pub instances: Vec<GtInstance>,
}

impl GtSet {
    /// Keypoints per instance; `None` for a file without annotations.
    pub fn num_keypoints(&self) -> Option<usize> {
        self.instances.first().map(|g| g.keypoints.len())
    }
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

fn triples(flat: &[f64], what: &str, i: usize) -> Result<Vec<[f64; 3]>> {
    if flat.is_empty() || flat.len() % 3 != 0 {
        return Err(schema(format!("{what} {i}: keypoints length {} is not a positive multiple of 3", flat.len())));
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(schema(format!("{what} {i}: non-finite keypoint value")));
    }
    Ok(flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

fn same_k<'a>(mut lens: impl Iterator<Item = (usize, &'a str, usize)>, k: Option<usize>) -> Result<()> {
    let Some(k) = k else { return Ok(()) };
    match lens.find(|(_, _, n)| *n != k) {
        Some((i, what, n)) => Err(schema(format!("{what} {i}: {n} keypoints, expected {k}"))),
        None => Ok(()),
    }
}

pub fn parse_gt(text: &str) -> Result<GtSet> {
    let file: GtFile = serde_json::from_str(text).map_err(|e| schema(format!("ground truth: {e}")))?;
    let image_ids: BTreeSet<u64> = file.images.iter().map(|im| im.id).collect();
    if image_ids.len() != file.images.len() {
        return Err(schema("ground truth: duplicate image id"));
    }
    let mut instances = Vec::with_capacity(file.annotations.len());
    for (i, a) in file.annotations.into_iter().enumerate() {
        if !image_ids.contains(&a.image_id) {
            return Err(schema(format!("annotation {i}: unknown image_id {}", a.image_id)));
        }
        if !(a.area.is_finite() && a.area >= 0.0) {
            return Err(schema(format!("annotation {i}: invalid area {}", a.area)));
        }
        if a.iscrowd > 1 {
            return Err(schema(format!("annotation {i}: iscrowd must be 0 or 1")));
        }
        let keypoints = triples(&a.keypoints, "annotation", i)?;
        if keypoints.iter().any(|k| !matches!(k[2], 0.0 | 1.0 | 2.0)) {
            return Err(schema(format!("annotation {i}: visibility must be 0, 1 or 2")));
        }
        instances.push(GtInstance {
            image_id: a.image_id,
            keypoints,
            area: a.area,
            iscrowd: a.iscrowd == 1,
        });
    }
    let k = instances.first().map(|g| g.keypoints.len());
    same_k(instances.iter().enumerate().map(|(i, g)| (i, "annotation", g.keypoints.len())), k)?;
    Ok(GtSet { image_ids, instances })
}

/// Result records; `image_ids` rejects detections on images absent from the
/// ground truth, `k` checks the keypoint count.
pub fn parse_dt(text: &str, image_ids: &BTreeSet<u64>, k: Option<usize>) -> Result<Vec<DtInstance>> {
    let records: Vec<ResultRecord> = serde_json::from_str(text).map_err(|e| schema(format!("detections: {e}")))?;
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        if !image_ids.contains(&r.image_id) {
            return Err(schema(format!("detection {i}: unknown image_id {}", r.image_id)));
        }
        if r.category_id != PERSON_CATEGORY {
            return Err(schema(format!("detection {i}: category_id must be {PERSON_CATEGORY}")));
        }
        if !r.score.is_finite() {
            return Err(schema(format!("detection {i}: non-finite score")));
        }
        out.push(DtInstance {
            image_id: r.image_id,
            keypoints: triples(&r.keypoints, "detection", i)?,
            score: r.score,
        });
    }
    let k = k.or_else(|| out.first().map(|d| d.keypoints.len()));
    same_k(out.iter().enumerate().map(|(i, d)| (i, "detection", d.keypoints.len())), k)?;
    Ok(out)
}

/// A JSON array of positive per-keypoint sigmas.
pub fn parse_sigmas(text: &str) -> Result<Vec<f64>> {
    let s: Vec<f64> = serde_json::from_str(text).map_err(|e| schema(format!("sigmas: {e}")))?;
    if s.is_empty() || s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(schema("sigmas must be a non-empty array of positive numbers"));
    }
    Ok(s)
}

fn utf8(path: &Path) -> Result<String> {
    String::from_utf8(read(path)?).map_err(|_| schema(format!("{}: not UTF-8", path.display())))
}

pub fn load_gt(path: &Path) -> Result<GtSet> {
    parse_gt(&utf8(path)?)
}

pub fn load_dt(path: &Path, gt: &GtSet) -> Result<Vec<DtInstance>> {
    parse_dt(&utf8(path)?, &gt.image_ids, gt.num_keypoints())
}

pub fn load_sigmas(path: &Path) -> Result<Vec<f64>> {
    parse_sigmas(&utf8(path)?)
}

fn flat_keypoints(kps: &[[f64; 3]], integer_v: bool) -> Value {
    let mut out = Vec::with_capacity(kps.len() * 3);
    for k in kps {
        out.push(json!(k[0]));
        out.push(json!(k[1]));
        out.push(if integer_v { json!(k[2] as u64) } else { json!(k[2]) });
    }
    Value::Array(out)
}

/// Ground-truth document for `scenes`. Annotation ids count from 1 in scene
/// order.
pub fn gt_json(scenes: &[Scene], skeleton: &Skeleton) -> Value {
    let images: Vec<Value> = scenes
        .iter()
        .map(|s| json!({"id": s.image_id, "width": s.width(), "height": s.height()}))
        .collect();
    let annotations: Vec<Value> = scenes
        .iter()
        .flat_map(|s| &s.gts)
        .enumerate()
        .map(|(i, g)| {
            json!({
                "id": i + 1,
                "image_id": g.image_id,
                "category_id": PERSON_CATEGORY,
                "keypoints": flat_keypoints(&g.keypoints, true),
                "num_keypoints": g.visible_count(),
                "area": g.area,
                "iscrowd": u8::from(g.iscrowd),
            })
        })
        .collect();
    let names: Vec<&str> = skeleton.joints.iter().map(|j| j.name).collect();
    let limbs: Vec<[usize; 2]> = skeleton
        .joints
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.parent.map(|p| [p + 1, i + 1]))
        .collect();
    json!({
        "images": images,
        "annotations": annotations,
        "categories": [{"id": PERSON_CATEGORY, "name": "person", "keypoints": names, "skeleton": limbs}],
    })
}

pub fn dt_json(dts: &[DtInstance]) -> Value {
    Value::Array(
        dts.iter()
            .map(|d| {
                json!({
                    "image_id": d.image_id,
                    "category_id": PERSON_CATEGORY,
                    "keypoints": flat_keypoints(&d.keypoints, false),
                    "score": d.score,
                })
            })
            .collect(),
    )
}

/// Canonical ground-truth text and the matching perfect-detection text.
pub fn export_coco(scenes: &[Scene], skeleton: &Skeleton) -> (String, String) {
    let perfect: Vec<DtInstance> = scenes.iter().flat_map(|s| s.perfect_detections()).collect();
    (to_canonical(&gt_json(scenes, skeleton)), to_canonical(&dt_json(&perfect)))
}
