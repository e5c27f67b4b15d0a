//! Object keypoint similarity and COCO-style keypoint average precision.
//!
//! The protocol follows the COCO keypoint evaluator: detections are matched
//! greedily per image in descending score order, ground truths outside the
//! active area range are ignored rather than removed, precision is made
//! monotone and sampled at 101 recall points.
//!
//! Departures from the reference implementation:
//! * crowd annotations and ground truths without a visible keypoint are
//!   dropped before evaluation;
//! * the medium range is half-open, `[32², 96²)`, so medium and large never
//!   share an instance;
//! * precision is `tp / (tp + fp)` without an epsilon in the denominator, so a
//!   perfect result scores exactly 1.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};

/// Per-keypoint OKS constants of the 17-joint COCO person skeleton.
pub const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

/// Constants for the 4-joint mini skeleton (pelvis, head, left foot, right
/// foot), borrowed from the nearest COCO joints.
pub const MINI_SIGMAS: [f64; 4] = [0.107, 0.079, 0.089, 0.089];

/// Default sigma table for `k` keypoints, if one ships.
pub fn default_sigmas(k: usize) -> Option<Vec<f64>> {
    match k {
        17 => Some(COCO_SIGMAS.to_vec()),
        4 => Some(MINI_SIGMAS.to_vec()),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub image_id: u64,
    /// `(x, y, v)` with visibility `v ∈ {0, 1, 2}`.
    pub keypoints: Vec<[f64; 3]>,
    pub area: f64,
    pub iscrowd: bool,
}

impl GtInstance {
    pub fn visible_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k[2] > 0.0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtInstance {
    pub image_id: u64,
    /// `(x, y, keypoint score)`.
    pub keypoints: Vec<[f64; 3]>,
    pub score: f64,
}

impl DtInstance {
    /// Bounding-box area of all keypoints.
    pub fn area(&self) -> f64 {
        if self.keypoints.is_empty() {
            return 0.0;
        }
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for k in &self.keypoints {
            x0 = x0.min(k[0]);
            x1 = x1.max(k[0]);
            y0 = y0.min(k[1]);
            y1 = y1.max(k[1]);
        }
        (x1 - x0) * (y1 - y0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange {
        lo: 0.0,
        hi: f64::INFINITY,
    };
    pub const MEDIUM: AreaRange = AreaRange {
        lo: 32.0 * 32.0,
        hi: 96.0 * 96.0,
    };
    pub const LARGE: AreaRange = AreaRange {
        lo: 96.0 * 96.0,
        hi: f64::INFINITY,
    };

    /// Half-open membership `lo <= area < hi`.
    pub fn contains(&self, area: f64) -> bool {
        area >= self.lo && area < self.hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub oks_thresholds: Vec<f64>,
    pub medium: AreaRange,
    pub large: AreaRange,
    pub sigmas: Vec<f64>,
    pub max_detections: usize,
}

impl EvalParams {
    /// Ten thresholds `0.50, 0.55, …, 0.95`, COCO area ranges, 20 detections.
    pub fn coco(sigmas: Vec<f64>) -> Self {
        Self {
            oks_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            medium: AreaRange::MEDIUM,
            large: AreaRange::LARGE,
            sigmas,
            max_detections: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = self.oks_thresholds.windows(2).all(|w| w[0] < w[1]);
        if self.oks_thresholds.is_empty() || !increasing {
            return Err(Error::InvalidConfig("OKS thresholds must be strictly increasing".into()));
        }
        if self.medium.hi > self.large.lo {
            return Err(Error::InvalidConfig("medium and large area ranges overlap".into()));
        }
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidConfig("sigmas must be positive".into()));
        }
        Ok(())
    }
}

/// AP summary; `-1` marks a category with no ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_m: f64,
    pub ap_l: f64,
}

impl ApReport {
    pub fn fields(&self) -> [(&'static str, f64); 5] {
        [
            ("AP", self.ap),
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("AP_M", self.ap_m),
            ("AP_L", self.ap_l),
        ]
    }
}

/// Mean over visible ground-truth keypoints of `exp(−d² / (2·area·(2σ)²))`.
pub fn oks(dt: &DtInstance, gt: &GtInstance, sigmas: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    let mut visible = 0usize;
    for ((d, g), s) in dt.keypoints.iter().zip(&gt.keypoints).zip(sigmas) {
        if g[2] <= 0.0 {
            continue;
        }
        let (dx, dy) = (d[0] - g[0], d[1] - g[1]);
        let var = (2.0 * s) * (2.0 * s);
        total += libm::exp(-(dx * dx + dy * dy) / (2.0 * gt.area * var));
        visible += 1;
    }
    if visible == 0 {
        return Err(Error::NoVisibleKeypoints);
    }
    Ok(total / visible as f64)
}

/// Match outcome of one detection at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionFlag {
    pub score: f64,
    pub matched: bool,
    /// Ignored detections count as neither true nor false positives.
    pub ignored: bool,
}

/// Per-image matching result at one threshold and area range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch {
    /// In the order detections were matched (descending score).
    pub flags: Vec<DetectionFlag>,
    /// Non-ignored ground truths.
    pub gt_count: usize,
}

/// Descending score; ties resolved by a canonical ordering of the keypoints so
/// results never depend on input order.
fn detection_order(a: &DtInstance, b: &DtInstance) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| {
        a.keypoints
            .iter()
            .flatten()
            .zip(b.keypoints.iter().flatten())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Canonical evaluation order of one image's records: usable ground truths
/// (non-crowd with a visible keypoint) and detections sorted by descending
/// score, truncated to `max_det`.
fn prepare<'a>(
    gts: &'a [GtInstance],
    dts: &'a [DtInstance],
    max_det: usize,
) -> (Vec<&'a GtInstance>, Vec<&'a DtInstance>) {
    let mut gts: Vec<&GtInstance> = gts
        .iter()
        .filter(|g| !g.iscrowd && g.visible_count() > 0)
        .collect();
    gts.sort_by(|a, b| {
        a.area.total_cmp(&b.area).then_with(|| {
            a.keypoints
                .iter()
                .flatten()
                .zip(b.keypoints.iter().flatten())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    });
    let mut dts: Vec<&DtInstance> = dts.iter().collect();
    dts.sort_by(|a, b| detection_order(a, b));
    dts.truncate(max_det);
    (gts, dts)
}

fn match_prepared(
    gts: &[&GtInstance],
    dts: &[&DtInstance],
    ious: &[Vec<f64>],
    threshold: f64,
    range: AreaRange,
) -> ImageMatch {
    // non-ignored ground truths first, stable
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by_key(|&i| !range.contains(gts[i].area));
    let ignored: Vec<bool> = order.iter().map(|&i| !range.contains(gts[i].area)).collect();
    let mut taken = vec![false; gts.len()];

    let mut flags = Vec::with_capacity(dts.len());
    for (d, dt) in dts.iter().enumerate() {
        let mut best = threshold.min(1.0 - 1e-10);
        let mut found: Option<usize> = None;
        for (slot, &gi) in order.iter().enumerate() {
            if taken[slot] {
                continue;
            }
            // a real match is never traded for an ignored one
            if let Some(m) = found {
                if !ignored[m] && ignored[slot] {
                    break;
                }
            }
            let o = ious[d][gi];
            if o < best {
                continue;
            }
            best = o;
            found = Some(slot);
        }
        let flag = match found {
            Some(slot) => {
                taken[slot] = true;
                DetectionFlag {
                    score: dt.score,
                    matched: true,
                    ignored: ignored[slot],
                }
            }
            None => DetectionFlag {
                score: dt.score,
                matched: false,
                ignored: !range.contains(dt.area()),
            },
        };
        flags.push(flag);
    }
    ImageMatch {
        flags,
        gt_count: ignored.iter().filter(|i| !**i).count(),
    }
}

fn oks_matrix(gts: &[&GtInstance], dts: &[&DtInstance], sigmas: &[f64]) -> Vec<Vec<f64>> {
    dts.iter()
        .map(|d| {
            gts.iter()
                .map(|g| oks(d, g, sigmas).unwrap_or(0.0))
                .collect()
        })
        .collect()
}

/// Greedy per-image matching at one OKS threshold.
///
/// Detections are visited by descending score; each takes the unmatched
/// ground truth with the highest OKS `>= threshold`, preferring in-range
/// ground truths. Detections matched to out-of-range ground truths, and
/// unmatched detections whose own area is out of range, are flagged ignored.
pub fn match_image(
    gts: &[GtInstance],
    dts: &[DtInstance],
    threshold: f64,
    range: AreaRange,
    sigmas: &[f64],
    max_det: usize,
) -> ImageMatch {
    let (gts, dts) = prepare(gts, dts, max_det);
    let ious = oks_matrix(&gts, &dts, sigmas);
    match_prepared(&gts, &dts, &ious, threshold, range)
}

/// 101-point interpolated AP over detections pooled across images.
///
/// Flags are stably sorted by descending score. Returns `-1` when
/// `gt_count == 0`.
pub fn average_precision(flags: &[DetectionFlag], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return -1.0;
    }
    let mut ordered: Vec<&DetectionFlag> = flags.iter().filter(|f| !f.ignored).collect();
    ordered.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut recall = Vec::with_capacity(ordered.len());
    let mut precision = Vec::with_capacity(ordered.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for f in &ordered {
        if f.matched {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / gt_count as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut total = 0.0;
    for r in recall_thresholds() {
        let idx = recall.partition_point(|&rc| rc < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

/// `0.00, 0.01, …, 1.00`.
pub fn recall_thresholds() -> impl Iterator<Item = f64> {
    (0..=100).map(|i| if i == 100 { 1.0 } else { i as f64 * 0.01 })
}

fn validate_records(gts: &[GtInstance], dts: &[DtInstance], k: usize) -> Result<()> {
    for (i, g) in gts.iter().enumerate() {
        if g.keypoints.len() != k {
            return Err(Error::Schema(format!(
                "ground truth {i} has {} keypoints, expected {k}",
                g.keypoints.len()
            )));
        }
        if !(g.area > 0.0) || !g.area.is_finite() {
            return Err(Error::Schema(format!("ground truth {i} has non-positive area")));
        }
        if g.keypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("ground truth {i} has non-finite keypoints")));
        }
    }
    for (i, d) in dts.iter().enumerate() {
        if d.keypoints.len() != k {
            return Err(Error::Schema(format!(
                "detection {i} has {} keypoints, expected {k}",
                d.keypoints.len()
            )));
        }
        if !d.score.is_finite() {
            return Err(Error::Schema(format!("detection {i} has a non-finite score")));
        }
    }
    Ok(())
}

fn mean_valid(values: &[f64]) -> f64 {
    let valid: Vec<f64> = values.iter().copied().filter(|v| *v > -1.0).collect();
    if valid.is_empty() {
        -1.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    }
}

/// Full keypoint AP report over a collection of images.
///
/// Images are processed in ascending `image_id` order and detections within
/// an image in canonical order, so the report does not depend on the order
/// of the input records.
pub fn evaluate(gts: &[GtInstance], dts: &[DtInstance], params: &EvalParams) -> Result<ApReport> {
    params.validate()?;
    validate_records(gts, dts, params.sigmas.len())?;

    let mut images: BTreeMap<u64, (Vec<GtInstance>, Vec<DtInstance>)> = BTreeMap::new();
    for g in gts {
        images.entry(g.image_id).or_default().0.push(g.clone());
    }
    for d in dts {
        images.entry(d.image_id).or_default().1.push(d.clone());
    }

    struct Prepared<'a> {
        gts: Vec<&'a GtInstance>,
        dts: Vec<&'a DtInstance>,
        ious: Vec<Vec<f64>>,
    }
    let prepared: Vec<Prepared> = images
        .values()
        .map(|(g, d)| {
            let (gts, dts) = prepare(g, d, params.max_detections);
            let ious = oks_matrix(&gts, &dts, &params.sigmas);
            Prepared { gts, dts, ious }
        })
        .collect();

    let ap_at = |threshold: f64, range: AreaRange| {
        let mut flags = Vec::new();
        let mut gt_count = 0;
        for p in &prepared {
            let m = match_prepared(&p.gts, &p.dts, &p.ious, threshold, range);
            flags.extend(m.flags);
            gt_count += m.gt_count;
        }
        average_precision(&flags, gt_count)
    };
    let sweep = |range: AreaRange| -> Vec<f64> {
        params
            .oks_thresholds
            .iter()
            .map(|&t| ap_at(t, range))
            .collect()
    };
    let all = sweep(AreaRange::ALL);
    let at = |t: f64| {
        params
            .oks_thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-12)
            .map_or_else(|| ap_at(t, AreaRange::ALL), |i| all[i])
    };
    Ok(ApReport {
        ap: mean_valid(&all),
        ap50: at(0.5),
        ap75: at(0.75),
        ap_m: mean_valid(&sweep(params.medium)),
        ap_l: mean_valid(&sweep(params.large)),
    })
}
