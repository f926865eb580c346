//! Synthetic stick figures: head disk, torso, two arms and two legs drawn on a
//! plain background, with exact boxes and five keypoints.
//!
//! Figures face the viewer, so the anatomical left hand and foot sit on the
//! image-right side of the body. Each figure occupies its own vertical strip,
//! which keeps figures from overlapping.

use super::{Dataset, ImageSource, JointCatalog, Sample};
use crate::geometry::{BoundingBox, Keypoint, PoseInstance};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub min_figures: usize,
    pub max_figures: usize,
    /// Stroke width of limbs in pixels.
    pub thickness: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            min_figures: 1,
            max_figures: 3,
            thickness: 2.0,
        }
    }
}

struct Figure {
    head: (f64, f64),
    head_radius: f64,
    segments: Vec<((f64, f64), (f64, f64))>,
    // head, left hand, right hand, left foot, right foot
    joints: [(f64, f64); 5],
    color: Rgb<u8>,
}

// Reach of the widest limb relative to figure height.
const ARM: f64 = 0.35;
const LEG: f64 = 0.4;

impl Figure {
    fn sample(rng: &mut ChaCha8Rng, strip: (f64, f64), img_h: f64, thickness: f64) -> Figure {
        let strip_w = strip.1 - strip.0;
        let max_scale = ((strip_w - 2.0 * thickness - 2.0) / (2.0 * ARM)).min(0.9 * img_h);
        let scale = rng.gen_range(0.7 * max_scale..=max_scale);
        let r = 0.12 * scale;
        let half = ARM * scale + thickness;
        let cx = rng.gen_range(strip.0 + half + 1.0..=strip.1 - half - 1.0);
        let top = rng.gen_range(1.0..=img_h - scale - 1.0);
        let head = (cx, top + r);
        let neck = (cx, top + 2.0 * r);
        let shoulder = (cx, top + 2.0 * r + 0.1 * scale);
        let hip = (cx, top + 0.6 * scale);
        let limb = |from: (f64, f64), len: f64, angle: f64, side: f64| {
            (from.0 + side * len * angle.sin(), from.1 + len * angle.cos())
        };
        let deg = |d: f64| d * PI / 180.0;
        let left_hand = limb(shoulder, ARM * scale, deg(rng.gen_range(20.0..160.0)), 1.0);
        let right_hand = limb(shoulder, ARM * scale, deg(rng.gen_range(20.0..160.0)), -1.0);
        let left_foot = limb(hip, LEG * scale, deg(rng.gen_range(10.0..45.0)), 1.0);
        let right_foot = limb(hip, LEG * scale, deg(rng.gen_range(10.0..45.0)), -1.0);
        let color = Rgb([
            rng.gen_range(140..=255),
            rng.gen_range(140..=255),
            rng.gen_range(140..=255),
        ]);
        Figure {
            head,
            head_radius: r,
            segments: vec![
                (neck, hip),
                (shoulder, left_hand),
                (shoulder, right_hand),
                (hip, left_foot),
                (hip, right_foot),
            ],
            joints: [head, left_hand, right_hand, left_foot, right_foot],
            color,
        }
    }

    fn covers(&self, p: (f64, f64), thickness: f64) -> bool {
        let d2 = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2);
        if d2(p, self.head) <= self.head_radius.powi(2) {
            return true;
        }
        let half = thickness / 2.0;
        self.segments.iter().any(|&(a, b)| {
            let ab = (b.0 - a.0, b.1 - a.1);
            let len2 = ab.0 * ab.0 + ab.1 * ab.1;
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((p.0 - a.0) * ab.0 + (p.1 - a.1) * ab.1) / len2).clamp(0.0, 1.0)
            };
            d2(p, (a.0 + t * ab.0, a.1 + t * ab.1)) <= half * half
        })
    }

    /// Extent of everything drawn, in pixel units.
    fn extent(&self, thickness: f64) -> (f64, f64, f64, f64) {
        let r = self.head_radius;
        let mut b = (self.head.0 - r, self.head.0 + r, self.head.1 - r, self.head.1 + r);
        let half = thickness / 2.0;
        for &(p, q) in &self.segments {
            for (x, y) in [p, q] {
                b.0 = b.0.min(x - half);
                b.1 = b.1.max(x + half);
                b.2 = b.2.min(y - half);
                b.3 = b.3.max(y + half);
            }
        }
        b
    }
}

/// `n_images` rendered images, deterministic in `seed`.
pub fn synth_stickfigures(n_images: usize, seed: u64, cfg: &SynthConfig) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut samples = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let n = rng.gen_range(cfg.min_figures.max(1)..=cfg.max_figures.max(cfg.min_figures.max(1)));
        let strip = w / n as f64;
        let figures: Vec<Figure> = (0..n)
            .map(|k| Figure::sample(&mut rng, (k as f64 * strip, (k + 1) as f64 * strip), h, cfg.thickness))
            .collect();
        let background = Rgb([rng.gen_range(10..70), rng.gen_range(10..70), rng.gen_range(10..70)]);
        let img = RgbImage::from_fn(cfg.width as u32, cfg.height as u32, |x, y| {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            figures
                .iter()
                .find(|f| f.covers(p, cfg.thickness))
                .map_or(background, |f| f.color)
        });
        let instances = figures
            .iter()
            .map(|f| {
                let (x0, x1, y0, y1) = f.extent(cfg.thickness);
                PoseInstance {
                    bbox: BoundingBox::new(x0 / w, x1 / w, y0 / h, y1 / h),
                    keypoints: f
                        .joints
                        .iter()
                        .enumerate()
                        .map(|(label, &(x, y))| Keypoint {
                            x: x / w,
                            y: y / h,
                            label,
                            visible: true,
                            score: 1.0,
                        })
                        .collect(),
                    score: 1.0,
                }
            })
            .collect();
        samples.push(Sample {
            id: i as u64 + 1,
            file_name: format!("synth_{i:05}.png"),
            width: cfg.width,
            height: cfg.height,
            instances,
            source: ImageSource::Memory(Arc::new(img)),
        });
    }
    Dataset {
        catalog: JointCatalog::stick_figure(),
        samples,
    }
}
