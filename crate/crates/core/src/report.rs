//! Dataset evaluation and the line-delimited JSON records written by the
//! command-line tools.
//!
//! Every record carries `schema` (record kind) and `version` fields.
//!
//! | schema | written by | one line per |
//! |---|---|---|
//! | `prtr.train-step` | `train` | optimizer step |
//! | `prtr.eval` | `eval` | flag combination |
//! | `prtr.poses` | `infer` | input image |
//! | `prtr.layer` | `visualize` | decoder layer |

use crate::cascade::model::{CascadeModel, InferenceOptions, ModelError};
use crate::data::{DataError, Dataset};
use crate::eval::{coco_ap, dataset_pck, CocoMetrics, CocoProtocol, EvalError, EvalImage, OksParams, Raster};
use crate::geometry::{BoundingBox, PoseInstance};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const REPORT_VERSION: u32 = 1;
pub const EVAL_SCHEMA: &str = "prtr.eval";
pub const POSES_SCHEMA: &str = "prtr.poses";
pub const LAYER_SCHEMA: &str = "prtr.layer";

/// PCK threshold as a fraction of the box diagonal.
pub const PCK_ALPHA: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// The three evaluation switches of the flag sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalFlags {
    /// Crop ground-truth boxes instead of detections.
    pub gt_box: bool,
    /// Keep the background logit in the readout softmax.
    pub include_bg_logit: bool,
    pub flip: bool,
}

impl EvalFlags {
    /// All eight combinations, `gt_box` varying slowest.
    pub fn sweep() -> Vec<EvalFlags> {
        (0..8)
            .map(|i| EvalFlags {
                gt_box: i & 4 != 0,
                include_bg_logit: i & 2 != 0,
                flip: i & 1 != 0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub version: u32,
    pub flags: EvalFlags,
    pub images: usize,
    pub instances: usize,
    /// Set when the dataset has no ground-truth person; metrics are then absent.
    pub no_instances: bool,
    pub pck_alpha: f64,
    pub pck: Option<f64>,
    pub pck_correct: usize,
    pub pck_total: usize,
    pub coco: Option<CocoMetrics>,
}

/// Runs the pipeline on every image of `data` and scores it.
pub fn evaluate(model: &CascadeModel, data: &Dataset, flags: EvalFlags) -> Result<EvalReport, ReportError> {
    let images = predict_dataset(model, data, flags)?;
    score(images, data, flags)
}

/// Predictions paired with ground truth for every image.
pub fn predict_dataset(model: &CascadeModel, data: &Dataset, flags: EvalFlags) -> Result<Vec<EvalImage>, ReportError> {
    let mut opts = InferenceOptions::new(&model.config, data.catalog.swap.clone());
    opts.flip = flags.flip;
    opts.exclude_background = !flags.include_bg_logit;
    let (h, w) = (model.config.image_height, model.config.image_width);
    data.samples
        .par_iter()
        .map(|s| {
            let image = s.load_tensor(h, w)?;
            let boxes: Vec<BoundingBox> = s.instances.iter().map(|p| p.bbox).collect();
            let preds = model.predict(&image, flags.gt_box.then_some(boxes.as_slice()), &opts)?;
            Ok(EvalImage {
                raster: Raster {
                    width: s.width,
                    height: s.height,
                },
                gts: s.instances.clone(),
                preds,
            })
        })
        .collect()
}

fn score(images: Vec<EvalImage>, data: &Dataset, flags: EvalFlags) -> Result<EvalReport, ReportError> {
    let instances = data.num_instances();
    let mut report = EvalReport {
        schema: EVAL_SCHEMA.into(),
        version: REPORT_VERSION,
        flags,
        images: data.len(),
        instances,
        no_instances: instances == 0,
        pck_alpha: PCK_ALPHA,
        pck: None,
        pck_correct: 0,
        pck_total: 0,
        coco: None,
    };
    if instances == 0 {
        return Ok(report);
    }
    let pck = dataset_pck(&images, PCK_ALPHA)?;
    report.pck = Some(pck.fraction());
    report.pck_correct = pck.correct;
    report.pck_total = pck.total;
    report.coco = Some(coco_ap(&images, &OksParams::for_joints(data.catalog.len()), &CocoProtocol::default())?);
    Ok(report)
}

/// Poses found in one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub schema: String,
    pub version: u32,
    pub image: String,
    pub width: usize,
    pub height: usize,
    /// Absent on success.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub people: Vec<PersonRecord>,
}

/// One person in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub score: f64,
    /// `[x_left, y_top, x_right, y_down]`.
    pub bbox: [f64; 4],
    /// `[x, y, score]` per joint, in joint order.
    pub keypoints: Vec<[f64; 3]>,
}

impl PersonRecord {
    pub fn from_pose(p: &PoseInstance, width: usize, height: usize) -> PersonRecord {
        let (w, h) = (width as f64, height as f64);
        let mut keypoints = vec![[0.0; 3]; p.keypoints.len()];
        for k in &p.keypoints {
            keypoints[k.label] = [k.x * w, k.y * h, k.score];
        }
        PersonRecord {
            score: p.score,
            bbox: [p.bbox.x_left * w, p.bbox.y_top * h, p.bbox.x_right * w, p.bbox.y_down * h],
            keypoints,
        }
    }
}
