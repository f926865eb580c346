//! The cascade model: a person detector feeding per-person keypoint detection.

use super::grid::{crop_features_multiscale, crop_to_tokens, cxcywh_to_edges};
use super::twostage::crop_image_twostage;
use crate::data::augment::{augment_crop, AugmentParams};
use crate::data::raster::mirror_tensor;
use crate::geometry::{is_involution, Affine2, BoundingBox, Keypoint, PoseInstance};
use crate::loss::{deep_supervision_loss, match_targets, LossBreakdown, LossWeights, MatchStrategy};
use crate::matcher::{self, BoxCostWeights, Target};
use crate::nn::{
    positional_encoding_2d, Backbone, ConfigError, Ctx, HeadKind, HeadOutput, ModelConfig, ParamStore, PositionFrame, SetPrediction, SetTransformer, SetTransformerSpec, Variant,
};
use crate::tensor::{Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Default person-probability cut for detections.
pub const PERSON_THRESHOLD: f64 = 0.5;
/// People per image whose crops are trained in one end-to-end step.
pub const PERSON_CAP: usize = 5;

/// One head output copied out of the tape: `[Q×K]` logits and `[Q×n]` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub logits: Vec<f64>,
    pub coords: Vec<f64>,
}

impl LayerOutput {
    fn rows(out: &HeadOutput, b: usize, q: usize) -> LayerOutput {
        let k = out.logits.shape()[1];
        let n = out.coords.shape()[1];
        LayerOutput {
            logits: out.logits.data()[b * q * k..(b + 1) * q * k].to_vec(),
            coords: out.coords.data()[b * q * n..(b + 1) * q * n].to_vec(),
        }
    }

    /// Per-query class probabilities; see [`matcher::class_probabilities`].
    pub fn probabilities(&self, n_queries: usize, exclude_background: bool) -> Vec<Vec<f64>> {
        let k = self.logits.len() / n_queries;
        self.logits
            .chunks(k)
            .map(|l| matcher::class_probabilities(l, exclude_background))
            .collect()
    }
}

/// Keypoint-stage outputs for one person crop.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointOutput {
    pub n_queries: usize,
    /// Heads on the raw query embedding, before any decoder layer.
    pub initial: LayerOutput,
    /// One entry per decoder layer; coordinates are in the crop frame.
    pub layers: Vec<LayerOutput>,
    /// Crop frame → image frame.
    pub to_image: Affine2,
}

impl KeypointOutput {
    pub fn last(&self) -> &LayerOutput {
        self.layers.last().unwrap_or(&self.initial)
    }

    /// Layer 0 is the query embedding, layer `l ≥ 1` the `l`-th decoder layer.
    pub fn layer(&self, l: usize) -> Option<&LayerOutput> {
        if l == 0 {
            Some(&self.initial)
        } else {
            self.layers.get(l - 1)
        }
    }
}

/// Selection of one query per joint class and the resulting skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    /// `queries[j]` is the query read out for joint `j`.
    pub queries: Vec<usize>,
    /// Image-frame keypoints, slot `j` has label `j`.
    pub keypoints: Vec<Keypoint>,
}

/// Picks one query per joint with the inference cost and maps its
/// coordinates to the image frame. The score of a keypoint is the matched
/// class probability.
pub fn readout_keypoints(out: &LayerOutput, n_queries: usize, n_joints: usize, exclude_background: bool, class_specific: bool, to_image: &Affine2) -> Result<Readout> {
    let probs = out.probabilities(n_queries, exclude_background);
    let queries: Vec<usize> = if class_specific {
        (0..n_joints).collect()
    } else {
        let classes: Vec<usize> = (0..n_joints).collect();
        let cost = matcher::cost_infer(&classes, &probs).map_err(|e| TensorError::Contract(e.to_string()))?;
        matcher::hungarian_solve(&cost)
            .map_err(|e| TensorError::Contract(e.to_string()))?
            .assignment
    };
    let keypoints = queries
        .iter()
        .enumerate()
        .map(|(j, &q)| {
            let (x, y) = to_image.apply(out.coords[2 * q], out.coords[2 * q + 1]);
            Keypoint {
                x,
                y,
                label: j,
                visible: true,
                score: probs[q][j],
            }
        })
        .collect();
    Ok(Readout { queries, keypoints })
}

/// All person queries before thresholding.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonCandidates {
    pub boxes: Vec<BoundingBox>,
    pub scores: Vec<f64>,
}

/// Inference switches.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOptions {
    pub person_threshold: f64,
    pub exclude_background: bool,
    pub flip: bool,
    /// Left/right permutation used by the flip test.
    pub swap: Vec<usize>,
}

impl InferenceOptions {
    pub fn new(config: &ModelConfig, swap: Vec<usize>) -> InferenceOptions {
        InferenceOptions {
            person_threshold: PERSON_THRESHOLD,
            exclude_background: config.exclude_background_at_readout,
            flip: false,
            swap,
        }
    }
}

/// Per-step knobs of the training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOptions {
    pub keypoint_weights: LossWeights,
    pub person_weights: LossWeights,
    pub person_cost: BoxCostWeights,
    pub person_cap: usize,
    /// End-to-end crops follow ground-truth boxes instead of matched predictions.
    pub gt_crops: bool,
    pub swap: Vec<usize>,
}

impl StepOptions {
    pub fn new(swap: Vec<usize>) -> StepOptions {
        StepOptions {
            keypoint_weights: LossWeights::keypoint(),
            person_weights: LossWeights::person(),
            person_cost: BoxCostWeights::default(),
            person_cap: PERSON_CAP,
            gt_crops: false,
            swap,
        }
    }
}

/// A training sample: image tensor, its people, and augmentation draws.
pub struct StepSample<'a> {
    pub image: &'a Tensor,
    pub people: &'a [PoseInstance],
    /// Augmentation per person (two-stage crops only).
    pub augment: &'a [AugmentParams],
    /// Seed for choosing which matched people are cropped.
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub person: LossBreakdown,
    pub keypoint: LossBreakdown,
    pub people_cropped: usize,
}

#[derive(Debug, Clone)]
pub struct CascadeModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    person: SetTransformer,
    keypoint_backbone: Option<Backbone>,
    keypoint: SetTransformer,
    person_pos: Arc<Vec<f64>>,
    keypoint_pos: Arc<Vec<f64>>,
}

const PERSON_STRIDE: usize = 8;

impl CascadeModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<CascadeModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let backbone = Backbone::new(&mut store, "person.backbone", config.backbone_channels, &mut rng);
        let spec = |in_channels, n_queries, kind| SetTransformerSpec {
            in_channels,
            d_model: d,
            n_heads: config.n_heads,
            ffn_dim: config.ffn_dim,
            n_encoder_layers: config.n_encoder_layers,
            n_decoder_layers: config.n_decoder_layers,
            n_queries,
            kind,
        };
        let person = SetTransformer::new(
            &mut store,
            "person",
            &spec(backbone.out_channels()[1], config.n_person_queries, HeadKind::Person),
            &mut rng,
        )?;
        let keypoint_backbone = match config.variant {
            Variant::TwoStage => Some(Backbone::new(&mut store, "keypoint.backbone", config.backbone_channels, &mut rng)),
            Variant::EndToEnd => None,
        };
        let keypoint = SetTransformer::new(
            &mut store,
            "keypoint",
            &spec(
                config.multiscale_channels(),
                config.n_keypoint_queries,
                HeadKind::Keypoint {
                    joints: config.n_joints,
                },
            ),
            &mut rng,
        )?;
        let person_pos = Arc::new(
            positional_encoding_2d(
                config.image_height / PERSON_STRIDE,
                config.image_width / PERSON_STRIDE,
                d,
                PositionFrame::Absolute,
            )?
            .to_vec(),
        );
        let keypoint_pos = Arc::new(positional_encoding_2d(config.crop_height, config.crop_width, d, PositionFrame::Absolute)?.to_vec());
        Ok(CascadeModel {
            config,
            store,
            backbone,
            person,
            keypoint_backbone,
            keypoint,
            person_pos,
            keypoint_pos,
        })
    }

    /// Rebuilds the architecture for `config` and adopts `store`'s values;
    /// names and shapes must match exactly.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<CascadeModel> {
        let mut model = CascadeModel::new(config, 0)?;
        if store.len() != model.store.len() {
            return Err(TensorError::Contract(format!(
                "checkpoint has {} parameters, architecture needs {}",
                store.len(),
                model.store.len()
            ))
            .into());
        }
        for p in store.iter() {
            let mine = model
                .store
                .get(&p.name)
                .ok_or_else(|| TensorError::Contract(format!("unexpected parameter {}", p.name)))?;
            if mine.shape != p.shape {
                return Err(TensorError::Contract(format!(
                    "parameter {} has shape {:?}, architecture needs {:?}",
                    p.name, p.shape, mine.shape
                ))
                .into());
            }
        }
        for p in store.iter() {
            model.store.set(&p.name, p.data.to_vec())?;
        }
        Ok(model)
    }

    pub fn n_joints(&self) -> usize {
        self.config.n_joints
    }

    fn keypoint_strategy(&self) -> MatchStrategy {
        if self.config.class_specific_queries {
            MatchStrategy::ClassSpecific
        } else {
            MatchStrategy::Hungarian
        }
    }

    /// Backbone maps at strides 4, 8, 16 and the person-stage predictions.
    pub fn person_forward(&self, ctx: &Ctx, image: &Tensor) -> Result<([Tensor; 3], SetPrediction)> {
        let maps = self.backbone.forward(ctx, image)?;
        let tokens = crop_to_tokens(&maps[1])?;
        let pos = Tensor::from_arc(&[self.person_pos.len() / self.config.d_model, self.config.d_model], self.person_pos.clone())?;
        let pred = self.person.forward(ctx, &tokens, &pos, 1)?;
        Ok((maps, pred))
    }

    /// Boxes and person probabilities of every person query.
    pub fn person_candidates(&self, image: &Tensor) -> Result<PersonCandidates> {
        let ctx = Ctx::inference(&self.store);
        let (_, pred) = self.person_forward(&ctx, image)?;
        Ok(candidates_from(pred.last()))
    }

    /// Person queries whose person probability reaches `threshold`, boxes clamped to the image.
    pub fn detect_persons(&self, image: &Tensor, threshold: f64) -> Result<Vec<PoseInstance>> {
        Ok(filter_candidates(&self.person_candidates(image)?, threshold))
    }

    /// Multi-scale crop tokens `[k·h·w × ΣC]` for end-to-end boxes given as edge tensors.
    fn e2e_tokens(&self, maps: &[Tensor; 3], edges: &[Tensor]) -> Result<(Tensor, Vec<Affine2>)> {
        let mut tokens = Vec::with_capacity(edges.len());
        let mut frames = Vec::with_capacity(edges.len());
        for e in edges {
            let (crop, bbox) = crop_features_multiscale(
                maps,
                e,
                self.config.enlarge_factor,
                self.config.crop_width,
                self.config.crop_height,
                self.config.grid_convention,
            )?;
            tokens.push(crop_to_tokens(&crop)?);
            frames.push(Affine2::from_box(&bbox));
        }
        Ok((Tensor::concat(&tokens, 0)?, frames))
    }

    /// Tokens of two-stage patches: the keypoint backbone's maps sampled on a
    /// cell-centered grid over the whole patch.
    fn patch_tokens(&self, ctx: &Ctx, patches: &[Tensor]) -> Result<Tensor> {
        let kb = self
            .keypoint_backbone
            .as_ref()
            .ok_or_else(|| TensorError::Contract("keypoint backbone exists only in the two-stage variant".into()))?;
        let (w, h) = (self.config.crop_width as f64, self.config.crop_height as f64);
        let centered = Tensor::vector(&[0.5 / w, 1.0 + 0.5 / w, 0.5 / h, 1.0 + 0.5 / h]);
        let mut tokens = Vec::with_capacity(patches.len());
        for p in patches {
            let maps = kb.forward(ctx, p)?;
            let crop = super::grid::sample_multiscale(&maps, &centered, self.config.crop_width, self.config.crop_height, self.config.grid_convention)?;
            tokens.push(crop_to_tokens(&crop)?);
        }
        Ok(Tensor::concat(&tokens, 0)?)
    }

    /// Keypoint transformer over `k` crops stacked in `tokens`.
    pub fn keypoint_forward(&self, ctx: &Ctx, tokens: &Tensor, k: usize) -> Result<SetPrediction> {
        let pos = Tensor::from_arc(&[self.keypoint_pos.len() / self.config.d_model, self.config.d_model], self.keypoint_pos.clone())?;
        Ok(self.keypoint.forward(ctx, tokens, &pos, k)?)
    }

    fn split_outputs(&self, pred: &SetPrediction, frames: &[Affine2]) -> Vec<KeypointOutput> {
        let q = self.config.n_keypoint_queries;
        frames
            .iter()
            .enumerate()
            .map(|(b, frame)| KeypointOutput {
                n_queries: q,
                initial: LayerOutput::rows(&pred.initial, 0, q),
                layers: pred.layers.iter().map(|l| LayerOutput::rows(l, b, q)).collect(),
                to_image: *frame,
            })
            .collect()
    }

    /// Keypoint predictions for each box, all crops in one batched pass.
    pub fn detect_keypoints(&self, image: &Tensor, boxes: &[BoundingBox]) -> Result<Vec<KeypointOutput>> {
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let ctx = Ctx::inference(&self.store);
        let (tokens, frames) = match self.config.variant {
            Variant::EndToEnd => {
                let maps = self.backbone.forward(&ctx, image)?;
                let edges: Vec<Tensor> = boxes
                    .iter()
                    .map(|b| Tensor::vector(&[b.x_left, b.x_right, b.y_top, b.y_down]))
                    .collect();
                self.e2e_tokens(&maps, &edges)?
            }
            Variant::TwoStage => {
                let mut patches = Vec::with_capacity(boxes.len());
                let mut frames = Vec::with_capacity(boxes.len());
                for b in boxes {
                    let p = crop_image_twostage(
                        image,
                        b,
                        self.config.patch_aspect(),
                        self.config.patch_height,
                        self.config.patch_width,
                        None,
                    )?;
                    patches.push(p.pixels);
                    frames.push(p.to_image);
                }
                (self.patch_tokens(&ctx, &patches)?, frames)
            }
        };
        let pred = self.keypoint_forward(&ctx, &tokens, boxes.len())?;
        Ok(self.split_outputs(&pred, &frames))
    }

    /// Detection (or the given boxes), keypoint detection and readout on one image.
    pub fn predict_single(&self, image: &Tensor, boxes: Option<&[BoundingBox]>, opts: &InferenceOptions) -> Result<Vec<PoseInstance>> {
        let people: Vec<PoseInstance> = match boxes {
            Some(bs) => bs
                .iter()
                .map(|b| PoseInstance {
                    bbox: *b,
                    keypoints: Vec::new(),
                    score: 1.0,
                })
                .collect(),
            None => self.detect_persons(image, opts.person_threshold)?,
        };
        let boxes: Vec<BoundingBox> = people.iter().map(|p| p.bbox).collect();
        let outputs = self.detect_keypoints(image, &boxes)?;
        people
            .into_iter()
            .zip(outputs)
            .map(|(mut p, out)| {
                let r = readout_keypoints(
                    out.last(),
                    out.n_queries,
                    self.config.n_joints,
                    opts.exclude_background,
                    self.config.class_specific_queries,
                    &out.to_image,
                )?;
                p.keypoints = r.keypoints;
                Ok(p)
            })
            .collect()
    }

    /// Full pipeline; with `opts.flip` the flip-test average of the image and its mirror.
    pub fn predict(&self, image: &Tensor, boxes: Option<&[BoundingBox]>, opts: &InferenceOptions) -> Result<Vec<PoseInstance>> {
        let plain = self.predict_single(image, boxes, opts)?;
        if !opts.flip {
            return Ok(plain);
        }
        let mirrored_boxes: Option<Vec<BoundingBox>> = boxes.map(|bs| bs.iter().map(BoundingBox::mirror).collect());
        let flipped = self.predict_single(&mirror_tensor(image), mirrored_boxes.as_deref(), opts)?;
        flip_test_average(&plain, &flipped, &opts.swap)
    }

    /// Training loss of one sample and its breakdown.
    pub fn training_loss(&self, ctx: &Ctx, sample: &StepSample, opts: &StepOptions) -> Result<(Tensor, StepReport)> {
        let (maps, person_pred) = self.person_forward(ctx, sample.image)?;
        let person_targets: Vec<Target> = sample
            .people
            .iter()
            .map(|p| Target {
                class: 0,
                coords: p.bbox.to_cxcywh().to_vec(),
            })
            .collect();
        let (person_loss, person_report) = deep_supervision_loss(
            &person_targets,
            &person_pred,
            HeadKind::Person,
            MatchStrategy::Boxes(opts.person_cost),
            &opts.person_weights,
        )?;
        let report = StepReport {
            person: person_report,
            ..StepReport::default()
        };
        if sample.people.is_empty() {
            return Ok((person_loss, report));
        }

        let (tokens, frames, people, flips): (Tensor, Vec<Affine2>, Vec<usize>, Vec<bool>) = match self.config.variant {
            Variant::EndToEnd => {
                let last = person_pred.last();
                let matching = match_targets(&person_targets, last, MatchStrategy::Boxes(opts.person_cost))?;
                let mut chosen: Vec<usize> = (0..sample.people.len()).collect();
                if chosen.len() > opts.person_cap {
                    chosen.shuffle(&mut ChaCha8Rng::seed_from_u64(sample.seed));
                    chosen.truncate(opts.person_cap);
                    chosen.sort_unstable();
                }
                let edges = chosen
                    .iter()
                    .map(|&g| {
                        if opts.gt_crops {
                            let b = sample.people[g].bbox;
                            Ok(Tensor::vector(&[b.x_left, b.x_right, b.y_top, b.y_down]))
                        } else {
                            let q = matching.assignment[g];
                            cxcywh_to_edges(&last.coords.slice(0, q, q + 1)?.reshape(&[4])?)
                        }
                    })
                    .collect::<std::result::Result<Vec<_>, TensorError>>()?;
                let (tokens, frames) = self.e2e_tokens(&maps, &edges)?;
                let flips = vec![false; chosen.len()];
                (tokens, frames, chosen, flips)
            }
            Variant::TwoStage => {
                let mut patches = Vec::with_capacity(sample.people.len());
                let mut frames = Vec::with_capacity(sample.people.len());
                let mut flips = Vec::with_capacity(sample.people.len());
                for (i, p) in sample.people.iter().enumerate() {
                    let params = sample.augment.get(i).copied().unwrap_or(AugmentParams::IDENTITY);
                    let crop = augment_crop(
                        sample.image,
                        p,
                        self.config.patch_aspect(),
                        self.config.patch_height,
                        self.config.patch_width,
                        &params,
                        &opts.swap,
                    )?;
                    patches.push(crop.pixels);
                    frames.push(crop.to_image);
                    flips.push(params.flip);
                }
                let tokens = self.patch_tokens(ctx, &patches)?;
                (tokens, frames, (0..sample.people.len()).collect(), flips)
            }
        };
        self.keypoint_loss_with(ctx, &tokens, &frames, &people, &flips, sample, opts, person_loss, report)
    }

    #[allow(clippy::too_many_arguments)]
    fn keypoint_loss_with(&self, ctx: &Ctx, tokens: &Tensor, frames: &[Affine2], people: &[usize], flips: &[bool], sample: &StepSample, opts: &StepOptions, person_loss: Tensor, mut report: StepReport) -> Result<(Tensor, StepReport)> {
        let k = people.len();
        let pred = self.keypoint_forward(ctx, tokens, k)?;
        let q = self.config.n_keypoint_queries;
        let kind = HeadKind::Keypoint {
            joints: self.config.n_joints,
        };
        let mut total = person_loss;
        let scale = 1.0 / k as f64;
        for (b, (&g, frame)) in people.iter().zip(frames).enumerate() {
            let inv = frame
                .inverse()
                .ok_or_else(|| TensorError::Contract("singular crop frame".into()))?;
            let targets: Vec<Target> = sample.people[g]
                .keypoints
                .iter()
                .filter(|kp| kp.visible)
                .map(|kp| {
                    let (x, y) = inv.apply(kp.x, kp.y);
                    Target {
                        class: if flips[b] { opts.swap[kp.label] } else { kp.label },
                        coords: vec![x, y],
                    }
                })
                .collect();
            let crop_pred = SetPrediction {
                initial: slice_rows(&pred.initial, 0, q)?,
                layers: pred
                    .layers
                    .iter()
                    .map(|l| slice_rows(l, b, q))
                    .collect::<std::result::Result<Vec<_>, TensorError>>()?,
            };
            let (loss, breakdown) = deep_supervision_loss(&targets, &crop_pred, kind, self.keypoint_strategy(), &opts.keypoint_weights)?;
            total = total.add(&loss.scale(scale)?)?;
            accumulate(&mut report.keypoint, &breakdown, scale);
        }
        report.people_cropped = k;
        Ok((total, report))
    }
}

fn accumulate(into: &mut LossBreakdown, part: &LossBreakdown, scale: f64) {
    into.total += part.total * scale;
    into.class_term += part.class_term * scale;
    into.coord_term += part.coord_term * scale;
    into.giou_term += part.giou_term * scale;
    if into.layers.len() < part.layers.len() {
        into.layers.resize(part.layers.len(), Default::default());
    }
    for (a, b) in into.layers.iter_mut().zip(&part.layers) {
        a.total += b.total * scale;
        a.class_term += b.class_term * scale;
        a.coord_term += b.coord_term * scale;
        a.giou_term += b.giou_term * scale;
    }
}

fn slice_rows(out: &HeadOutput, b: usize, q: usize) -> std::result::Result<HeadOutput, TensorError> {
    if out.logits.shape()[0] == q {
        return Ok(out.clone());
    }
    Ok(HeadOutput {
        logits: out.logits.slice(0, b * q, (b + 1) * q)?,
        coords: out.coords.slice(0, b * q, (b + 1) * q)?,
    })
}

fn candidates_from(out: &HeadOutput) -> PersonCandidates {
    let q = out.logits.shape()[0];
    let lo = LayerOutput {
        logits: out.logits.to_vec(),
        coords: out.coords.to_vec(),
    };
    let probs = lo.probabilities(q, false);
    PersonCandidates {
        boxes: out
            .coords
            .data()
            .chunks(4)
            .map(|c| BoundingBox::from_cxcywh(c[0], c[1], c[2], c[3]).clamp_unit())
            .collect(),
        scores: probs.iter().map(|p| p[0]).collect(),
    }
}

/// Keeps candidates with score at least `threshold` and a non-empty box,
/// highest score first.
pub fn filter_candidates(c: &PersonCandidates, threshold: f64) -> Vec<PoseInstance> {
    let mut out: Vec<PoseInstance> = c
        .boxes
        .iter()
        .zip(&c.scores)
        .filter(|(b, &s)| s >= threshold && b.is_valid())
        .map(|(b, &s)| PoseInstance {
            bbox: *b,
            keypoints: Vec::new(),
            score: s,
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Minimum IoU for pairing a person with its mirrored counterpart.
pub const FLIP_PAIR_IOU: f64 = 0.5;

/// Averages the plain-image people with the mirrored-image people mapped back.
///
/// `flipped` is the pipeline output on the mirrored image. Each flipped
/// person is mirrored back (coordinates `x → 1 − x`, labels through `swap`)
/// and paired with a plain person by maximum box IoU; paired people average
/// their boxes, keypoints and scores. Unpaired people pass through.
pub fn flip_test_average(plain: &[PoseInstance], flipped: &[PoseInstance], swap: &[usize]) -> Result<Vec<PoseInstance>> {
    if !is_involution(swap) {
        return Err(ConfigError(format!("swap {swap:?} is not an involution")).into());
    }
    let back: Vec<PoseInstance> = flipped.iter().map(|p| p.mirror(swap)).collect();
    let pairs = pair_by_iou(plain, &back);
    let mut used = vec![false; back.len()];
    let mut out = Vec::with_capacity(plain.len() + back.len());
    for (i, p) in plain.iter().enumerate() {
        match pairs[i] {
            Some(j) => {
                used[j] = true;
                out.push(average_pose(p, &back[j]));
            }
            None => out.push(p.clone()),
        }
    }
    out.extend(back.iter().zip(&used).filter(|(_, u)| !**u).map(|(p, _)| p.clone()));
    Ok(out)
}

fn pair_by_iou(a: &[PoseInstance], b: &[PoseInstance]) -> Vec<Option<usize>> {
    if a.is_empty() || b.is_empty() {
        return vec![None; a.len()];
    }
    let transpose = a.len() > b.len();
    let (rows, cols) = if transpose { (b, a) } else { (a, b) };
    let values: Vec<f64> = rows
        .iter()
        .flat_map(|r| cols.iter().map(move |c| -r.bbox.iou(&c.bbox)))
        .collect();
    let cost = matcher::CostMatrix::new(rows.len(), cols.len(), values, matcher::CostMode::Infer).expect("rows ≤ cols");
    let assignment = matcher::hungarian_solve(&cost).expect("finite IoU").assignment;
    let mut out = vec![None; a.len()];
    for (r, &c) in assignment.iter().enumerate() {
        if rows[r].bbox.iou(&cols[c].bbox) < FLIP_PAIR_IOU {
            continue;
        }
        if transpose {
            out[c] = Some(r);
        } else {
            out[r] = Some(c);
        }
    }
    out
}

fn average_pose(a: &PoseInstance, b: &PoseInstance) -> PoseInstance {
    let mid = |x: f64, y: f64| 0.5 * (x + y);
    let bbox = BoundingBox::new(
        mid(a.bbox.x_left, b.bbox.x_left),
        mid(a.bbox.x_right, b.bbox.x_right),
        mid(a.bbox.y_top, b.bbox.y_top),
        mid(a.bbox.y_down, b.bbox.y_down),
    );
    let keypoints = a
        .keypoints
        .iter()
        .zip(&b.keypoints)
        .map(|(p, q)| Keypoint {
            x: mid(p.x, q.x),
            y: mid(p.y, q.y),
            label: p.label,
            visible: p.visible || q.visible,
            score: mid(p.score, q.score),
        })
        .collect();
    PoseInstance {
        bbox,
        keypoints,
        score: mid(a.score, b.score),
    }
}

/// Random augmentation draws for a sample, one per person.
pub fn draw_augmentations(cfg: &crate::data::AugmentConfig, seed: u64, sample_index: u64, people: usize) -> Vec<AugmentParams> {
    (0..people)
        .map(|p| AugmentParams::sample(cfg, seed, sample_index.wrapping_mul(64).wrapping_add(p as u64)))
        .collect()
}

/// Seed for per-step random choices that does not depend on worker scheduling.
pub fn step_seed(seed: u64, step: u64, sample: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(1 << 20).wrapping_add(sample));
    rng.gen()
}

#[cfg(test)]
fn _assert_shareable() {
    fn f<T: Send + Sync>() {}
    f::<CascadeModel>();
}
