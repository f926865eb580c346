//! Keypoint metrics: object keypoint similarity, COCO-style AP/AR and PCK.
//!
//! Poses are stored in normalized coordinates; metrics work in pixels, so each
//! evaluated image carries its raster size.

use crate::geometry::{BoundingBox, PoseInstance};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("ground truth has no visible keypoints")]
    NoVisibleJoints,
    #[error("reference length must be positive, got {0}")]
    BadReference(f64),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Standard COCO per-joint sigmas.
pub const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
];

/// Uniform per-joint constant used for the synthetic corpus.
pub const SYNTHETIC_K: f64 = 0.1;

/// Per-joint falloff constants `k_j` (COCO uses `k_j = 2σ_j`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OksParams {
    pub k: Vec<f64>,
}

impl OksParams {
    pub fn coco() -> OksParams {
        OksParams {
            k: COCO_SIGMAS.iter().map(|s| 2.0 * s).collect(),
        }
    }

    pub fn uniform(joints: usize, k: f64) -> OksParams {
        OksParams { k: vec![k; joints] }
    }

    /// COCO constants for 17 joints, the uniform synthetic constant otherwise.
    pub fn for_joints(joints: usize) -> OksParams {
        if joints == COCO_SIGMAS.len() {
            OksParams::coco()
        } else {
            OksParams::uniform(joints, SYNTHETIC_K)
        }
    }
}

/// `mean_j exp(−d_j² / (2 s² k_j²))` over the given joints.
pub fn oks_from_distances(d2: &[f64], k: &[f64], s2: f64) -> Result<f64, EvalError> {
    if d2.is_empty() {
        return Err(EvalError::NoVisibleJoints);
    }
    let total: f64 = d2
        .iter()
        .zip(k)
        .map(|(d, k)| (-d / (2.0 * s2 * k * k)).exp())
        .sum();
    Ok(total / d2.len() as f64)
}

/// Raster size used to convert normalized coordinates into pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
}

impl Raster {
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.width as f64, y * self.height as f64)
    }

    pub fn box_area(&self, b: &BoundingBox) -> f64 {
        b.area() * (self.width * self.height) as f64
    }

    pub fn box_diagonal(&self, b: &BoundingBox) -> f64 {
        (b.width() * self.width as f64).hypot(b.height() * self.height as f64)
    }
}

/// OKS of `pred` against `gt`, scale from the ground-truth box area in pixels.
pub fn oks(pred: &PoseInstance, gt: &PoseInstance, params: &OksParams, raster: Raster) -> Result<f64, EvalError> {
    let mut d2 = Vec::new();
    let mut k = Vec::new();
    for g in gt.keypoints.iter().filter(|g| g.visible) {
        let p = pred
            .keypoints
            .iter()
            .find(|p| p.label == g.label)
            .ok_or_else(|| EvalError::Contract(format!("prediction lacks joint {}", g.label)))?;
        let (px, py) = raster.px(p.x, p.y);
        let (gx, gy) = raster.px(g.x, g.y);
        d2.push((px - gx).powi(2) + (py - gy).powi(2));
        k.push(*params.k.get(g.label).ok_or_else(|| {
            EvalError::Contract(format!("no OKS constant for joint {}", g.label))
        })?);
    }
    oks_from_distances(&d2, &k, raster.box_area(&gt.bbox))
}

/// One image's predictions and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub raster: Raster,
    pub gts: Vec<PoseInstance>,
    pub preds: Vec<PoseInstance>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CocoMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub ar: f64,
}

/// Evaluation protocol constants.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoProtocol {
    pub thresholds: Vec<f64>,
    pub max_dets: usize,
    pub recall_points: usize,
}

impl Default for CocoProtocol {
    fn default() -> Self {
        CocoProtocol {
            thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            max_dets: 20,
            recall_points: 101,
        }
    }
}

const AREA_ALL: (f64, f64) = (0.0, 1e10);
const AREA_MEDIUM: (f64, f64) = (32.0 * 32.0, 96.0 * 96.0);
const AREA_LARGE: (f64, f64) = (96.0 * 96.0, 1e10);

/// Area of the keypoint extent, the size a detection is filed under.
fn keypoint_extent_area(p: &PoseInstance, raster: Raster) -> f64 {
    let pts: Vec<(f64, f64)> = p.keypoints.iter().map(|k| raster.px(k.x, k.y)).collect();
    if pts.is_empty() {
        return 0.0;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    (x1 - x0) * (y1 - y0)
}

struct ImageMatches {
    scores: Vec<f64>,
    // [threshold][detection]
    matched: Vec<Vec<bool>>,
    ignored: Vec<Vec<bool>>,
    n_gt: usize,
}

fn match_image(img: &EvalImage, params: &OksParams, protocol: &CocoProtocol, range: (f64, f64)) -> Result<ImageMatches, EvalError> {
    let in_range = |a: f64| a >= range.0 && a <= range.1;
    let mut gt_order: Vec<usize> = (0..img.gts.len()).collect();
    let gt_ignore: Vec<bool> = img
        .gts
        .iter()
        .map(|g| !in_range(img.raster.box_area(&g.bbox)))
        .collect();
    gt_order.sort_by_key(|&g| gt_ignore[g]);
    let mut det_order: Vec<usize> = (0..img.preds.len()).collect();
    det_order.sort_by(|&a, &b| img.preds[b].score.total_cmp(&img.preds[a].score));
    det_order.truncate(protocol.max_dets);

    let mut sim = vec![vec![0.0; gt_order.len()]; det_order.len()];
    for (di, &d) in det_order.iter().enumerate() {
        for (gi, &g) in gt_order.iter().enumerate() {
            sim[di][gi] = oks(&img.preds[d], &img.gts[g], params, img.raster)?;
        }
    }
    let mut matched = Vec::with_capacity(protocol.thresholds.len());
    let mut ignored = Vec::with_capacity(protocol.thresholds.len());
    for &t in &protocol.thresholds {
        let mut gt_taken = vec![false; gt_order.len()];
        let mut dm = vec![false; det_order.len()];
        let mut di_ignored = vec![false; det_order.len()];
        for di in 0..det_order.len() {
            let mut best = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for gi in 0..gt_order.len() {
                if gt_taken[gi] {
                    continue;
                }
                if let Some(mm) = m {
                    if !gt_ignore[gt_order[mm]] && gt_ignore[gt_order[gi]] {
                        break;
                    }
                }
                if sim[di][gi] < best {
                    continue;
                }
                best = sim[di][gi];
                m = Some(gi);
            }
            match m {
                Some(gi) => {
                    gt_taken[gi] = true;
                    dm[di] = true;
                    di_ignored[di] = gt_ignore[gt_order[gi]];
                }
                None => {
                    let area = keypoint_extent_area(&img.preds[det_order[di]], img.raster);
                    di_ignored[di] = !in_range(area);
                }
            }
        }
        matched.push(dm);
        ignored.push(di_ignored);
    }
    Ok(ImageMatches {
        scores: det_order.iter().map(|&d| img.preds[d].score).collect(),
        matched,
        ignored,
        n_gt: gt_ignore.iter().filter(|i| !**i).count(),
    })
}

/// Precision per threshold and recall per threshold for one area range;
/// `None` when the range holds no ground truth.
fn accumulate(images: &[EvalImage], params: &OksParams, protocol: &CocoProtocol, range: (f64, f64)) -> Result<Option<(Vec<f64>, Vec<f64>)>, EvalError> {
    let per_image = images
        .iter()
        .filter(|img| !img.gts.is_empty() || !img.preds.is_empty())
        .map(|img| match_image(img, params, protocol, range))
        .collect::<Result<Vec<_>, _>>()?;
    let n_gt: usize = per_image.iter().map(|m| m.n_gt).sum();
    if n_gt == 0 {
        return Ok(None);
    }
    let mut dets: Vec<(f64, usize, usize)> = Vec::new();
    for (i, m) in per_image.iter().enumerate() {
        for (d, &s) in m.scores.iter().enumerate() {
            dets.push((s, i, d));
        }
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let recall_grid: Vec<f64> = (0..protocol.recall_points)
        .map(|r| r as f64 / (protocol.recall_points - 1) as f64)
        .collect();
    let mut precisions = Vec::with_capacity(protocol.thresholds.len());
    let mut recalls = Vec::with_capacity(protocol.thresholds.len());
    for t in 0..protocol.thresholds.len() {
        let (mut tp, mut fp) = (0.0, 0.0);
        let mut rc = Vec::new();
        let mut pr = Vec::new();
        for &(_, i, d) in &dets {
            if per_image[i].ignored[t][d] {
                continue;
            }
            if per_image[i].matched[t][d] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            rc.push(tp / n_gt as f64);
            pr.push(tp / (tp + fp + f64::EPSILON));
        }
        recalls.push(rc.last().copied().unwrap_or(0.0));
        for i in (1..pr.len()).rev() {
            if pr[i] > pr[i - 1] {
                pr[i - 1] = pr[i];
            }
        }
        let mut q = 0.0;
        for r in &recall_grid {
            let idx = rc.partition_point(|v| v < r);
            if idx < pr.len() {
                q += pr[idx];
            }
        }
        precisions.push(q / recall_grid.len() as f64);
    }
    Ok(Some((precisions, recalls)))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// AP over the OKS thresholds, AP at 0.5 and 0.75, AP for medium and large
/// people, and AR. A size split without ground truth reports −1.
pub fn coco_ap(images: &[EvalImage], params: &OksParams, protocol: &CocoProtocol) -> Result<CocoMetrics, EvalError> {
    let at = |ths: &[f64], target: f64| -> Option<usize> { ths.iter().position(|t| (t - target).abs() < 1e-9) };
    let all = accumulate(images, params, protocol, AREA_ALL)?;
    let split = |range| -> Result<f64, EvalError> {
        Ok(accumulate(images, params, protocol, range)?.map_or(-1.0, |(p, _)| mean(&p)))
    };
    let (ap, ap50, ap75, ar) = match &all {
        Some((p, r)) => (
            mean(p),
            at(&protocol.thresholds, 0.5).map_or(-1.0, |i| p[i]),
            at(&protocol.thresholds, 0.75).map_or(-1.0, |i| p[i]),
            mean(r),
        ),
        None => (-1.0, -1.0, -1.0, -1.0),
    };
    Ok(CocoMetrics {
        ap,
        ap50,
        ap75,
        ap_m: split(AREA_MEDIUM)?,
        ap_l: split(AREA_LARGE)?,
        ar,
    })
}

/// Correct and total counts of visible joints within `alpha · reference` pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PckCount {
    pub correct: usize,
    pub total: usize,
}

impl PckCount {
    pub fn add(&mut self, other: PckCount) {
        self.correct += other.correct;
        self.total += other.total;
    }

    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// PCK of one prediction: a visible joint counts when its pixel distance is at
/// most `alpha · reference`. `pred = None` marks every visible joint wrong.
pub fn pck(pred: Option<&PoseInstance>, gt: &PoseInstance, alpha: f64, reference: f64, raster: Raster) -> Result<PckCount, EvalError> {
    if !(reference > 0.0) {
        return Err(EvalError::BadReference(reference));
    }
    let limit = alpha * reference;
    let mut count = PckCount::default();
    for g in gt.keypoints.iter().filter(|g| g.visible) {
        count.total += 1;
        let Some(p) = pred.and_then(|p| p.keypoints.iter().find(|k| k.label == g.label)) else {
            continue;
        };
        let (px, py) = raster.px(p.x, p.y);
        let (gx, gy) = raster.px(g.x, g.y);
        if (px - gx).hypot(py - gy) <= limit {
            count.correct += 1;
        }
    }
    Ok(count)
}

/// Minimum box IoU for a detection to be credited to a ground-truth person.
pub const PCK_MATCH_IOU: f64 = 0.3;

/// Dataset PCK@alpha with the ground-truth box diagonal as reference length.
///
/// Detections are taken in descending score order, each claiming the
/// unclaimed ground-truth person of highest box IoU (at least
/// [`PCK_MATCH_IOU`]). Ground truth left unclaimed scores zero.
pub fn dataset_pck(images: &[EvalImage], alpha: f64) -> Result<PckCount, EvalError> {
    let mut total = PckCount::default();
    for img in images {
        let assigned = greedy_box_match(&img.preds, &img.gts);
        for (g, gt) in img.gts.iter().enumerate() {
            if gt.num_visible() == 0 {
                continue;
            }
            let pred = assigned[g].map(|p| &img.preds[p]);
            total.add(pck(pred, gt, alpha, img.raster.box_diagonal(&gt.bbox), img.raster)?);
        }
    }
    Ok(total)
}

/// For each ground-truth person, the prediction credited to it.
pub fn greedy_box_match(preds: &[PoseInstance], gts: &[PoseInstance]) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut assigned = vec![None; gts.len()];
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if assigned[g].is_some() {
                continue;
            }
            let iou = preds[p].bbox.iou(&gt.bbox);
            if iou >= PCK_MATCH_IOU && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            assigned[g] = Some(p);
        }
    }
    assigned
}
