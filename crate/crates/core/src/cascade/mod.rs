//! The two-transformer cascade: person detection, cropping, keypoint
//! detection, readout and flip-test averaging.

pub mod grid;
pub mod model;
pub mod twostage;

pub use grid::{crop_features_multiscale, grid_sample, make_grid, CropGrid};
pub use twostage::{crop_image_twostage, Patch};
pub use model::{filter_candidates, flip_test_average, readout_keypoints, CascadeModel, InferenceOptions, KeypointOutput, LayerOutput, ModelError, PersonCandidates, Readout, StepOptions, StepReport, StepSample};
