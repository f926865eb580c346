//! The `prtr` command line: train, eval, infer and visualize.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. `PRTR_WORKERS`
//! sets the number of worker threads.

use crate::cascade::model::{CascadeModel, InferenceOptions, PERSON_THRESHOLD};
use crate::checkpoint::{self, check_config};
use crate::data::{load_coco_keypoints, raster, synth_stickfigures, Dataset, LoaderOptions, SynthConfig};
use crate::nn::ModelConfig;
use crate::render::{default_sigma, draw_overlay, draw_trajectories, joint_map, layer_snapshots, map_to_image, Stacking};
use crate::report::{evaluate, EvalFlags, PersonRecord, PoseRecord, POSES_SCHEMA, REPORT_VERSION};
use crate::train::{train, RunConfig};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const WORKERS_ENV: &str = "PRTR_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "prtr", version, about = "Cascade-transformer multi-person pose estimation")]
pub struct Cli {
    /// Seed for every random choice; `train` uses it instead of the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Detect poses in images.
    Infer(InferArgs),
    /// Dump per-layer predictions, probability maps and keypoint trajectories.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// COCO annotation file, a directory holding `annotations.json` and
    /// `images/`, or `synth:N:SEED`.
    #[arg(long)]
    pub data: String,
    /// Image directory for a bare annotation file.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Run config whose model section must match the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub flip: bool,
    #[arg(long)]
    pub gt_box: bool,
    #[arg(long)]
    pub include_bg_logit: bool,
    /// Report all eight combinations of the three flags above.
    #[arg(long)]
    pub sweep_table5: bool,
    /// Report file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    /// Directory for overlay PNGs.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    #[arg(long, default_value_t = PERSON_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub flip: bool,
    #[arg(long)]
    pub include_bg_logit: bool,
    /// Pose file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Person rank by detection score.
    #[arg(long, default_value_t = 0)]
    pub person: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Single layer to render (0 is the query embedding); all layers when absent.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Gaussian width in pixels; scales with the image width by default.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Sum query Gaussians instead of taking their pointwise maximum.
    #[arg(long)]
    pub sum: bool,
    #[arg(long, default_value_t = PERSON_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub include_bg_logit: bool,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(msg) = configure_workers() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn configure_workers() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))?;
    // a pool may already exist when called repeatedly in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => cmd_train(&config, cli.seed),
        Command::Eval(a) => cmd_eval(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Visualize(a) => cmd_visualize(&a),
    }
}

fn cmd_train(config: &Path, seed: Option<u64>) -> Result<()> {
    let mut run = RunConfig::from_file(config)?;
    if let Some(s) = seed {
        run.seed = s;
    }
    let base = config.parent().unwrap_or(Path::new("."));
    let out = train(run, base)?;
    eprintln!(
        "trained: final loss {:?}, best PCK {:?}; wrote {} and {}",
        out.final_loss,
        out.best_pck,
        out.last.display(),
        out.best.display()
    );
    Ok(())
}

/// Loads a checkpoint; with `expected`, its config must match field for field.
pub fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<CascadeModel> {
    let ck = checkpoint::load(path)?;
    if let Some(e) = expected {
        check_config(e, &ck.config).with_context(|| format!("{} does not match the run config", path.display()))?;
    }
    CascadeModel::from_store(ck.config, ck.store).with_context(|| format!("loading {}", path.display()))
}

/// Resolves the `--data` argument.
pub fn load_dataset(spec: &str, images: Option<&Path>) -> Result<Dataset> {
    if let Some(rest) = spec.strip_prefix("synth:") {
        let (n, seed) = rest
            .split_once(':')
            .ok_or_else(|| anyhow!("expected synth:N:SEED, got {spec}"))?;
        return Ok(synth_stickfigures(
            n.parse().context("image count")?,
            seed.parse().context("seed")?,
            &SynthConfig::default(),
        ));
    }
    let path = PathBuf::from(spec);
    let (ann, root) = if path.is_dir() {
        (path.join("annotations.json"), images.map_or_else(|| path.join("images"), Path::to_path_buf))
    } else {
        let parent = path.parent().unwrap_or(Path::new("."));
        let root = images.map_or_else(
            || {
                let sib = parent.join("images");
                if sib.is_dir() {
                    sib
                } else {
                    parent.to_path_buf()
                }
            },
            Path::to_path_buf,
        );
        (path.clone(), root)
    };
    let (data, skipped) = load_coco_keypoints(&ann, &root, LoaderOptions::default())?;
    if !skipped.missing_images.is_empty() {
        eprintln!("warning: {} listed images not found under {}", skipped.missing_images.len(), root.display());
    }
    Ok(data)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_line<T: serde::Serialize>(w: &mut dyn Write, rec: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    writeln!(w)?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let expected = match &a.config {
        Some(c) => Some(RunConfig::from_file(c)?.model_config().map_err(|e| anyhow!(e))?),
        None => None,
    };
    let model = load_model(&a.ckpt, expected.as_ref())?;
    let data = load_dataset(&a.data, a.images.as_deref())?;
    if data.catalog.len() != model.n_joints() {
        bail!("dataset has {} joints, checkpoint has {}", data.catalog.len(), model.n_joints());
    }
    let flags = if a.sweep_table5 {
        EvalFlags::sweep()
    } else {
        vec![EvalFlags {
            gt_box: a.gt_box,
            include_bg_logit: a.include_bg_logit,
            flip: a.flip,
        }]
    };
    let mut out = output(a.out.as_deref())?;
    for f in flags {
        write_line(&mut *out, &evaluate(&model, &data, f)?)?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let model = load_model(&a.ckpt, None)?;
    let swap = crate::data::JointCatalog::for_joints(model.n_joints()).swap;
    let mut opts = InferenceOptions::new(&model.config, swap);
    opts.person_threshold = a.threshold;
    opts.flip = a.flip;
    opts.exclude_background = !a.include_bg_logit;
    if let Some(dir) = &a.overlay {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut out = output(a.out.as_deref())?;
    let mut failures = 0;
    for path in &a.images {
        let rec = match infer_one(&model, path, &opts, a.overlay.as_deref()) {
            Ok(r) => r,
            Err(e) => {
                failures += 1;
                eprintln!("error: {}: {e:#}", path.display());
                PoseRecord {
                    schema: POSES_SCHEMA.into(),
                    version: REPORT_VERSION,
                    image: path.display().to_string(),
                    width: 0,
                    height: 0,
                    error: Some(format!("{e:#}")),
                    people: Vec::new(),
                }
            }
        };
        write_line(&mut *out, &rec)?;
    }
    out.flush()?;
    if failures > 0 {
        bail!("{failures} of {} images failed", a.images.len());
    }
    Ok(())
}

fn infer_one(model: &CascadeModel, path: &Path, opts: &InferenceOptions, overlay: Option<&Path>) -> Result<PoseRecord> {
    let rgb = raster::read_rgb(path)?;
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let image = raster::to_model_input(&rgb, model.config.image_height, model.config.image_width);
    let people = model.predict(&image, None, opts)?;
    if let Some(dir) = overlay {
        let name = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        raster::write_png(&draw_overlay(&rgb, &people), &dir.join(format!("{name}_overlay.png")))?;
    }
    Ok(PoseRecord {
        schema: POSES_SCHEMA.into(),
        version: REPORT_VERSION,
        image: path.display().to_string(),
        width: w,
        height: h,
        error: None,
        people: people.iter().map(|p| PersonRecord::from_pose(p, w, h)).collect(),
    })
}

fn cmd_visualize(a: &VisualizeArgs) -> Result<()> {
    let model = load_model(&a.ckpt, None)?;
    let rgb = raster::read_rgb(&a.image)?;
    let image = raster::to_model_input(&rgb, model.config.image_height, model.config.image_width);
    let people = model.detect_persons(&image, a.threshold)?;
    let person = people
        .get(a.person)
        .ok_or_else(|| anyhow!("person {} requested, {} detected", a.person, people.len()))?;
    let out = model
        .detect_keypoints(&image, &[person.bbox])?
        .pop()
        .expect("one box in, one output");
    let layers = a.layer.map(|l| l..=l);
    let snaps = layer_snapshots(&model, &out, !a.include_bg_logit, layers)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut rec = output(Some(&a.out.join("layers.jsonl")))?;
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let sigma = a.sigma.unwrap_or_else(|| default_sigma(w));
    let stacking = if a.sum { Stacking::Sum } else { Stacking::Max };
    for s in &snaps {
        write_line(&mut *rec, s)?;
        for j in 0..model.n_joints() {
            let map = joint_map(s, j, w, h, sigma, stacking);
            let path = a.out.join(format!("layer{}_joint{}.png", s.layer, j));
            map_to_image(&map, w, h)
                .save(&path)
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    rec.flush()?;
    raster::write_png(&draw_trajectories(&rgb, &snaps), &a.out.join("trajectories.png"))?;
    Ok(())
}
