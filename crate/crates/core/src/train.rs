//! Run configuration and the training loop.

use crate::cascade::model::{draw_augmentations, step_seed, CascadeModel, ModelError, StepOptions, StepSample};
use crate::checkpoint::{self, CheckpointError, Precision};
use crate::data::{load_coco_keypoints, synth_stickfigures, AugmentConfig, DataError, Dataset, LoaderOptions, SynthConfig};
use crate::loss::LossBreakdown;
use crate::nn::{Ctx, ModelConfig, ParamGroup};
use crate::report::{evaluate, EvalFlags, REPORT_VERSION};
use crate::tensor::optim::{AdamW, AdamWConfig};
use crate::tensor::{Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss at step {0}")]
    Diverged(u64),
}

impl From<crate::eval::EvalError> for TrainError {
    fn from(e: crate::eval::EvalError) -> Self {
        TrainError::Tensor(TensorError::Contract(e.to_string()))
    }
}

/// Where training images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        images: usize,
        seed: u64,
        #[serde(default)]
        render: SynthConfig,
    },
    Coco {
        annotations: PathBuf,
        images: PathBuf,
        #[serde(default = "yes")]
        v1_visible: bool,
    },
}

fn yes() -> bool {
    true
}

impl DataSource {
    pub fn load(&self, base: &Path) -> Result<Dataset, TrainError> {
        match self {
            DataSource::Synthetic { images, seed, render } => Ok(synth_stickfigures(*images, *seed, render)),
            DataSource::Coco {
                annotations,
                images,
                v1_visible,
            } => {
                let (d, skipped) = load_coco_keypoints(
                    &base.join(annotations),
                    &base.join(images),
                    LoaderOptions {
                        v1_visible: *v1_visible,
                    },
                )?;
                if !skipped.missing_images.is_empty() {
                    eprintln!("warning: {} images listed but missing", skipped.missing_images.len());
                }
                Ok(d)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub backbone_lr: f64,
    pub transformer_lr: f64,
    pub weight_decay: f64,
    /// Steps at which both learning rates are multiplied by `gamma`.
    #[serde(default)]
    pub milestones: Vec<u64>,
    #[serde(default = "half")]
    pub gamma: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    #[serde(default)]
    pub grad_clip: f64,
}

fn half() -> f64 {
    0.5
}

impl OptimConfig {
    /// Learning rates and decay of the full-scale recipe, with
    /// milestones in steps.
    pub fn full(steps_per_epoch: u64) -> OptimConfig {
        OptimConfig {
            backbone_lr: 1e-5,
            transformer_lr: 1e-4,
            weight_decay: 1e-4,
            milestones: vec![120 * steps_per_epoch, 140 * steps_per_epoch],
            gamma: 0.5,
            grad_clip: 0.0,
        }
    }

    pub fn desk() -> OptimConfig {
        OptimConfig {
            backbone_lr: 1e-3,
            transformer_lr: 1e-3,
            weight_decay: 1e-4,
            milestones: Vec::new(),
            gamma: 0.5,
            grad_clip: 1.0,
        }
    }

    /// Multiplier applied to the base rates at `step`.
    pub fn lr_factor(&self, step: u64) -> f64 {
        self.gamma.powi(self.milestones.iter().filter(|&&m| step >= m).count() as i32)
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig::desk()
    }
}

/// Inference switches used when the trainer evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSwitches {
    #[serde(default)]
    pub flip: bool,
    /// Softmax over joint classes only at readout.
    #[serde(default = "yes")]
    pub exclude_background: bool,
    #[serde(default)]
    pub gt_box: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: u64,
    #[serde(default = "one")]
    pub batch_size: usize,
    pub train: DataSource,
    #[serde(default)]
    pub val: Option<DataSource>,
    #[serde(default)]
    pub profile: Profile,
    /// Overrides on top of the profile's model config.
    #[serde(default)]
    pub model: toml::Table,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub eval: EvalSwitches,
    #[serde(default = "no_augment")]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub precision: Precision,
    /// End-to-end crops follow ground-truth boxes for this many initial steps.
    #[serde(default)]
    pub gt_crop_steps: u64,
    /// Steps between evaluations that pick the best checkpoint; 0 evaluates
    /// only at the end.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn one() -> usize {
    1
}

fn no_augment() -> AugmentConfig {
    AugmentConfig {
        enabled: false,
        ..AugmentConfig::default()
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("run")
}

impl RunConfig {
    pub fn parse(text: &str, path: &str) -> Result<RunConfig, TrainError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| TrainError::Config {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        cfg.model_config().map_err(|e| TrainError::Config {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        if cfg.batch_size == 0 {
            return Err(TrainError::Config {
                path: path.to_string(),
                message: "batch_size must be at least 1".into(),
            });
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        RunConfig::parse(&text, &path.display().to_string())
    }

    /// The profile's model config with the `[model]` table applied.
    pub fn model_config(&self) -> Result<ModelConfig, String> {
        let base = match self.profile {
            Profile::Desk => ModelConfig::desk(),
            Profile::Full => ModelConfig::full(),
        };
        let mut value = toml::Table::try_from(&base).map_err(|e| e.to_string())?;
        for (k, v) in &self.model {
            if !value.contains_key(k) {
                return Err(format!("unknown model field `{k}`"));
            }
            value.insert(k.clone(), v.clone());
        }
        let cfg: ModelConfig = value.try_into().map_err(|e: toml::de::Error| format!("model: {e}"))?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// Desk run on `images` synthetic stick-figure images: batch 4, rates
    /// halved at 2/3 and 13/15 of the schedule.
    pub fn synthetic(images: usize, steps: u64, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            steps,
            batch_size: 4,
            train: DataSource::Synthetic {
                images,
                seed,
                render: SynthConfig::default(),
            },
            val: None,
            profile: Profile::Desk,
            model: toml::Table::new(),
            optim: OptimConfig {
                milestones: vec![steps * 2 / 3, steps * 13 / 15],
                ..OptimConfig::desk()
            },
            eval: EvalSwitches {
                exclude_background: true,
                ..EvalSwitches::default()
            },
            augment: no_augment(),
            precision: Precision::F32,
            gt_crop_steps: 0,
            eval_every: 0,
            output_dir: default_output(),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub schema: String,
    pub version: u32,
    pub step: u64,
    pub loss: f64,
    pub backbone_lr: f64,
    pub transformer_lr: f64,
    pub grad_norm: f64,
    pub person: LossBreakdown,
    pub keypoint: LossBreakdown,
}

pub const STEP_SCHEMA: &str = "prtr.train-step";

/// Model, optimizer and data of one run; [`Trainer::step`] advances it.
pub struct Trainer {
    pub run: RunConfig,
    pub model: CascadeModel,
    pub data: Dataset,
    images: Vec<Arc<Vec<f64>>>,
    opt: AdamW,
    step: u64,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl Trainer {
    pub fn new(run: RunConfig, data: Dataset) -> Result<Trainer, TrainError> {
        let config = run.model_config().map_err(|message| TrainError::Config {
            path: "model".into(),
            message,
        })?;
        if data.catalog.len() != config.n_joints {
            return Err(TrainError::Config {
                path: "model".into(),
                message: format!("dataset has {} joints, model has n_joints = {}", data.catalog.len(), config.n_joints),
            });
        }
        if data.is_empty() {
            return Err(TrainError::Config {
                path: "train".into(),
                message: "training set is empty".into(),
            });
        }
        let images = data
            .samples
            .iter()
            .map(|s| s.load_tensor(config.image_height, config.image_width).map(|t| Arc::new(t.to_vec())))
            .collect::<Result<Vec<_>, _>>()?;
        let mut model = CascadeModel::new(config, run.seed)?;
        if run.precision == Precision::F32 {
            model.store.round_to_f32();
        }
        let sizes: Vec<usize> = model.store.iter().map(|p| p.data.len()).collect();
        let opt = AdamW::new(
            AdamWConfig {
                weight_decay: run.optim.weight_decay,
                ..AdamWConfig::default()
            },
            &sizes,
        )?;
        let mut t = Trainer {
            run,
            model,
            data,
            images,
            opt,
            step: 0,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        };
        t.reshuffle();
        Ok(t)
    }

    /// Loads the configured training set and builds the trainer.
    pub fn from_config(run: RunConfig, base: &Path) -> Result<Trainer, TrainError> {
        let data = run.train.load(base)?;
        Trainer::new(run, data)
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.run.seed ^ 0x5eed);
        rng.set_stream(self.epoch);
        self.order = (0..self.data.len()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        (0..self.run.batch_size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.epoch += 1;
                    self.reshuffle();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    /// One optimizer update on the next batch.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let batch = self.next_batch();
        let mut opts = StepOptions::new(self.data.catalog.swap.clone());
        opts.gt_crops = self.step < self.run.gt_crop_steps;
        let step = self.step;
        let run = &self.run;
        let model = &self.model;
        let images = &self.images;
        let data = &self.data;
        let results: Vec<_> = batch
            .par_iter()
            .map(|&i| {
                let people = &data.samples[i].instances;
                let augment = draw_augmentations(&run.augment, run.seed, (step << 20) + i as u64, people.len());
                let image = Tensor::from_arc(&[3, model.config.image_height, model.config.image_width], images[i].clone())?;
                let sample = StepSample {
                    image: &image,
                    people,
                    augment: &augment,
                    seed: step_seed(run.seed, step, i as u64),
                };
                let ctx = Ctx::training(&model.store);
                let (loss, report) = model.training_loss(&ctx, &sample, &opts)?;
                let value = loss.item()?;
                let grads = loss.backward()?;
                Ok::<_, TrainError>((value, report, ctx.collect(&grads)))
            })
            .collect();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut person = LossBreakdown::default();
        let mut keypoint = LossBreakdown::default();
        let mut grads: Vec<Vec<f64>> = self.model.store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        for r in results {
            let (value, report, g) = r?;
            loss += value * scale;
            add_breakdown(&mut person, &report.person, scale);
            add_breakdown(&mut keypoint, &report.keypoint, scale);
            for (acc, g) in grads.iter_mut().zip(g) {
                if let Some(g) = g {
                    acc.iter_mut().zip(g).for_each(|(a, v)| *a += v * scale);
                }
            }
        }
        if !loss.is_finite() {
            return Err(TrainError::Diverged(step));
        }
        let grad_norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let clip = self.run.optim.grad_clip;
        if clip > 0.0 && grad_norm > clip {
            let s = clip / grad_norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
        let factor = self.run.optim.lr_factor(step);
        let (blr, tlr) = (self.run.optim.backbone_lr * factor, self.run.optim.transformer_lr * factor);
        let lrs: Vec<f64> = self
            .model
            .store
            .iter()
            .map(|p| match p.group {
                ParamGroup::Backbone => blr,
                ParamGroup::Transformer => tlr,
            })
            .collect();
        let grads: Vec<Option<Vec<f64>>> = grads.into_iter().map(Some).collect();
        let mut values = self.model.store.values_mut();
        self.opt.step(&mut values, &grads, &lrs)?;
        drop(values);
        if self.run.precision == Precision::F32 {
            self.model.store.round_to_f32();
        }
        self.step += 1;
        Ok(StepRecord {
            schema: STEP_SCHEMA.into(),
            version: REPORT_VERSION,
            step,
            loss,
            backbone_lr: blr,
            transformer_lr: tlr,
            grad_norm,
            person,
            keypoint,
        })
    }
}

fn add_breakdown(into: &mut LossBreakdown, part: &LossBreakdown, scale: f64) {
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

/// Paths written by [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub last: PathBuf,
    pub best: PathBuf,
    pub log: PathBuf,
    pub final_loss: Option<f64>,
    pub best_pck: Option<f64>,
}

/// Runs the whole schedule, writing `train_log.jsonl`, `last.ckpt` and
/// `best.ckpt` under the output directory (relative to `base`).
pub fn train(run: RunConfig, base: &Path) -> Result<TrainOutcome, TrainError> {
    let out = base.join(&run.output_dir);
    let val = match &run.val {
        Some(v) => Some(v.load(base)?),
        None => None,
    };
    let mut trainer = Trainer::from_config(run, base)?;
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |source| TrainError::Io { path: p, source }
    };
    std::fs::create_dir_all(&out).map_err(io(&out))?;
    let log_path = out.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(io(&log_path))?);
    let (last, best) = (out.join("last.ckpt"), out.join("best.ckpt"));
    let precision = trainer.run.precision;
    let save = |t: &Trainer, p: &Path| checkpoint::save(p, &t.model.config, &t.model.store, precision);
    let score = |t: &Trainer| -> Result<f64, TrainError> {
        let flags = EvalFlags {
            flip: t.run.eval.flip,
            gt_box: t.run.eval.gt_box,
            include_bg_logit: !t.run.eval.exclude_background,
        };
        let data = val.as_ref().unwrap_or(&t.data);
        let r = evaluate(&t.model, data, flags).map_err(|e| TrainError::Tensor(TensorError::Contract(e.to_string())))?;
        Ok(r.pck.unwrap_or(0.0))
    };

    let mut final_loss = None;
    let mut best_pck = None;
    for _ in 0..trainer.run.steps {
        let rec = trainer.step()?;
        serde_json::to_writer(&mut log, &rec).expect("record serializes");
        writeln!(log).map_err(io(&log_path))?;
        final_loss = Some(rec.loss);
        let every = trainer.run.eval_every;
        if every > 0 && trainer.steps_done() % every == 0 {
            let s = score(&trainer)?;
            if best_pck.map_or(true, |b| s > b) {
                best_pck = Some(s);
                save(&trainer, &best)?;
            }
        }
    }
    log.flush().map_err(io(&log_path))?;
    save(&trainer, &last)?;
    let s = score(&trainer)?;
    if best_pck.map_or(true, |b| s > b) {
        best_pck = Some(s);
        save(&trainer, &best)?;
    }
    Ok(TrainOutcome {
        last,
        best,
        log: log_path,
        final_loss,
        best_pck,
    })
}
