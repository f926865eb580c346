//! Datasets: COCO keypoint files, the synthetic stick-figure corpus and
//! training augmentation.

pub mod augment;
pub mod coco;
pub mod raster;
pub mod synth;

use crate::geometry::{is_involution, PoseInstance};
use crate::tensor::Tensor;
use image::RgbImage;
use std::path::PathBuf;
use std::sync::Arc;

pub use augment::{augment_crop, AugmentConfig, AugmentParams, AugmentedCrop};
pub use coco::{load_coco_keypoints, write_coco, LoaderOptions, SkipReport};
pub use synth::{synth_stickfigures, SynthConfig};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: parse error at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        path: String,
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("invalid joint catalog: {0}")]
    Catalog(String),
}

/// Joint names plus the left/right swap permutation used by mirroring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointCatalog {
    pub names: Vec<String>,
    pub swap: Vec<usize>,
}

impl JointCatalog {
    /// Pairs `left_X` with `right_X`; other joints map to themselves.
    pub fn from_names(names: Vec<String>) -> Result<JointCatalog, DataError> {
        let swap = names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let partner = if let Some(rest) = n.strip_prefix("left_") {
                    format!("right_{rest}")
                } else if let Some(rest) = n.strip_prefix("right_") {
                    format!("left_{rest}")
                } else {
                    return i;
                };
                names.iter().position(|m| *m == partner).unwrap_or(i)
            })
            .collect();
        JointCatalog::new(names, swap)
    }

    pub fn new(names: Vec<String>, swap: Vec<usize>) -> Result<JointCatalog, DataError> {
        if names.len() != swap.len() || !is_involution(&swap) {
            return Err(DataError::Catalog(format!(
                "swap {swap:?} is not an involution over {} joints",
                names.len()
            )));
        }
        Ok(JointCatalog { names, swap })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// The stick-figure catalog for 5 joints, COCO for 17, otherwise
    /// unnamed joints that mirror onto themselves.
    pub fn for_joints(n: usize) -> JointCatalog {
        match n {
            5 => JointCatalog::stick_figure(),
            17 => JointCatalog::coco(),
            _ => JointCatalog {
                names: (0..n).map(|i| format!("joint_{i}")).collect(),
                swap: (0..n).collect(),
            },
        }
    }

    pub fn stick_figure() -> JointCatalog {
        let names = ["head", "left_hand", "right_hand", "left_foot", "right_foot"];
        JointCatalog::from_names(names.iter().map(|s| s.to_string()).collect()).expect("paired names")
    }

    pub fn coco() -> JointCatalog {
        let names = [
            "nose",
            "left_eye",
            "right_eye",
            "left_ear",
            "right_ear",
            "left_shoulder",
            "right_shoulder",
            "left_elbow",
            "right_elbow",
            "left_wrist",
            "right_wrist",
            "left_hip",
            "right_hip",
            "left_knee",
            "right_knee",
            "left_ankle",
            "right_ankle",
        ];
        JointCatalog::from_names(names.iter().map(|s| s.to_string()).collect()).expect("paired names")
    }
}

/// Where a sample's pixels live.
#[derive(Debug, Clone)]
pub enum ImageSource {
    Memory(Arc<RgbImage>),
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<PoseInstance>,
    pub source: ImageSource,
}

impl Sample {
    pub fn load_rgb(&self) -> Result<Arc<RgbImage>, DataError> {
        match &self.source {
            ImageSource::Memory(img) => Ok(img.clone()),
            ImageSource::File(path) => raster::read_rgb(path).map(Arc::new),
        }
    }

    /// Pixels as a `[3×height×width]` tensor resampled to the model input size.
    pub fn load_tensor(&self, height: usize, width: usize) -> Result<Tensor, DataError> {
        let rgb = self.load_rgb()?;
        Ok(raster::to_model_input(&rgb, height, width))
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub catalog: JointCatalog,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_instances(&self) -> usize {
        self.samples.iter().map(|s| s.instances.len()).sum()
    }
}
