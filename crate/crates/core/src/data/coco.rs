//! COCO keypoint annotation files: loading and writing.

use super::{raster, DataError, Dataset, ImageSource, JointCatalog, Sample};
use crate::geometry::{BoundingBox, Keypoint, PoseInstance};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Deserialize, Serialize)]
struct CocoFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize, Serialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Deserialize, Serialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    #[serde(default = "person_category")]
    category_id: u64,
    bbox: [f64; 4],
    keypoints: Vec<f64>,
    #[serde(default)]
    num_keypoints: usize,
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

fn person_category() -> u64 {
    1
}

#[derive(Debug, Deserialize, Serialize)]
struct CocoCategory {
    id: u64,
    name: String,
    #[serde(default)]
    keypoints: Vec<String>,
    #[serde(default)]
    skeleton: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoaderOptions {
    /// Treat "labeled but not visible" (v = 1) keypoints as visible.
    pub v1_visible: bool,
}

impl Default for LoaderOptions {
    fn default() -> Self {
        LoaderOptions { v1_visible: true }
    }
}

/// What the loader left out, and why.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SkipReport {
    pub missing_images: Vec<String>,
    /// Annotations with no visible keypoint.
    pub dropped_instances: usize,
    pub crowd_annotations: usize,
    /// Annotation ids rejected for a degenerate box.
    pub degenerate_boxes: Vec<u64>,
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let before: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    before + column.saturating_sub(1)
}

/// Reads a COCO keypoint file; images are resolved against `image_root`.
pub fn load_coco_keypoints(path: &Path, image_root: &Path, opts: LoaderOptions) -> Result<(Dataset, SkipReport), DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_coco(&text, &path.display().to_string(), image_root, opts)
}

pub fn parse_coco(text: &str, path: &str, image_root: &Path, opts: LoaderOptions) -> Result<(Dataset, SkipReport), DataError> {
    let file: CocoFile = serde_json::from_str(text).map_err(|e| DataError::Parse {
        path: path.to_string(),
        offset: byte_offset(text, e.line(), e.column()),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let schema = |message: String| DataError::Schema {
        path: path.to_string(),
        message,
    };

    let person = file
        .categories
        .iter()
        .find(|c| c.name == "person" && !c.keypoints.is_empty())
        .or_else(|| file.categories.iter().find(|c| !c.keypoints.is_empty()));
    let (catalog, category_id) = match person {
        Some(c) => (JointCatalog::from_names(c.keypoints.clone())?, Some(c.id)),
        None => match file.annotations.first().map(|a| a.keypoints.len() / 3) {
            Some(j) if j != 17 => return Err(schema(format!("no keypoint category describes {j} joints"))),
            _ => (JointCatalog::coco(), None),
        },
    };
    let joints = catalog.len();

    let mut report = SkipReport::default();
    let mut samples = Vec::new();
    let mut index = HashMap::new();
    for img in &file.images {
        if index.contains_key(&img.id) {
            return Err(schema(format!("duplicate image id {}", img.id)));
        }
        let full: PathBuf = image_root.join(&img.file_name);
        if !full.is_file() {
            report.missing_images.push(img.file_name.clone());
            index.insert(img.id, None);
            continue;
        }
        if img.width == 0 || img.height == 0 {
            return Err(schema(format!("image {} has zero extent", img.id)));
        }
        index.insert(img.id, Some(samples.len()));
        samples.push(Sample {
            id: img.id,
            file_name: img.file_name.clone(),
            width: img.width,
            height: img.height,
            instances: Vec::new(),
            source: ImageSource::File(full),
        });
    }

    for ann in &file.annotations {
        if category_id.is_some_and(|c| c != ann.category_id) {
            continue;
        }
        let slot = *index
            .get(&ann.image_id)
            .ok_or_else(|| schema(format!("annotation {} refers to unknown image {}", ann.id, ann.image_id)))?;
        if ann.keypoints.len() != 3 * joints {
            return Err(schema(format!(
                "annotation {} has {} keypoint values, expected {}",
                ann.id,
                ann.keypoints.len(),
                3 * joints
            )));
        }
        let Some(slot) = slot else {
            continue;
        };
        if ann.iscrowd != 0 {
            report.crowd_annotations += 1;
            continue;
        }
        let sample = &mut samples[slot];
        let (w, h) = (sample.width as f64, sample.height as f64);
        let keypoints: Vec<Keypoint> = ann
            .keypoints
            .chunks(3)
            .enumerate()
            .map(|(label, t)| {
                let v = t[2];
                let visible = v >= 2.0 || (v >= 1.0 && opts.v1_visible);
                if v > 0.0 {
                    Keypoint {
                        x: t[0] / w,
                        y: t[1] / h,
                        label,
                        visible,
                        score: 1.0,
                    }
                } else {
                    Keypoint::missing(label)
                }
            })
            .collect();
        if ann.keypoints.chunks(3).all(|t| t[2] <= 0.0) || keypoints.iter().all(|k| !k.visible) {
            report.dropped_instances += 1;
            continue;
        }
        let [bx, by, bw, bh] = ann.bbox;
        let bbox = BoundingBox::new(bx / w, (bx + bw) / w, by / h, (by + bh) / h);
        if !bbox.is_valid() {
            report.degenerate_boxes.push(ann.id);
            continue;
        }
        sample.instances.push(PoseInstance {
            bbox,
            keypoints,
            score: 1.0,
        });
    }
    Ok((Dataset { catalog, samples }, report))
}

/// Writes `dataset` as `annotations.json` plus `images/*.png` under `dir`.
/// Pixels are taken from memory or copied from their files.
pub fn write_coco(dataset: &Dataset, dir: &Path) -> Result<PathBuf, DataError> {
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |source| DataError::Io { path: p, source }
    };
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(io(&images_dir))?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut next_id = 1;
    for s in &dataset.samples {
        let rgb = s.load_rgb()?;
        raster::write_png(&rgb, &images_dir.join(&s.file_name))?;
        images.push(CocoImage {
            id: s.id,
            file_name: s.file_name.clone(),
            width: s.width,
            height: s.height,
        });
        let (w, h) = (s.width as f64, s.height as f64);
        for inst in &s.instances {
            let keypoints = inst
                .keypoints
                .iter()
                .flat_map(|k| {
                    if k.visible {
                        [k.x * w, k.y * h, 2.0]
                    } else {
                        [0.0, 0.0, 0.0]
                    }
                })
                .collect();
            let b = &inst.bbox;
            annotations.push(CocoAnnotation {
                id: next_id,
                image_id: s.id,
                category_id: 1,
                bbox: [b.x_left * w, b.y_top * h, b.width() * w, b.height() * h],
                keypoints,
                num_keypoints: inst.num_visible(),
                area: b.area() * w * h,
                iscrowd: 0,
                score: None,
            });
            next_id += 1;
        }
    }
    let file = CocoFile {
        images,
        annotations,
        categories: vec![CocoCategory {
            id: 1,
            name: "person".into(),
            keypoints: dataset.catalog.names.clone(),
            skeleton: Vec::new(),
        }],
    };
    let path = dir.join("annotations.json");
    let text = serde_json::to_string_pretty(&file).expect("serializable");
    std::fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}
