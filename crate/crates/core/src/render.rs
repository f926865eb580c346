//! Pose overlays, stacked probability maps and per-layer keypoint trajectories.

use crate::cascade::model::{readout_keypoints, CascadeModel, KeypointOutput, ModelError};
use crate::geometry::{BoundingBox, PoseInstance};
use crate::tensor::TensorError;
use image::{Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

/// Marker color of joint class `j` is `CLASS_COLORS[j % CLASS_COLORS.len()]`.
pub const CLASS_COLORS: [[u8; 3]; 17] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 128, 0],
    [128, 0, 255],
    [0, 128, 255],
    [255, 0, 128],
    [128, 255, 0],
    [0, 255, 128],
    [128, 64, 0],
    [64, 0, 128],
    [0, 128, 64],
    [192, 192, 192],
    [255, 192, 128],
];

const BOX_COLOR: Rgb<u8> = Rgb([255, 255, 255]);

pub fn class_color(label: usize) -> Rgb<u8> {
    Rgb(CLASS_COLORS[label % CLASS_COLORS.len()])
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let n = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        put(img, (x0 + t * (x1 - x0)).floor() as i64, (y0 + t * (y1 - y0)).floor() as i64, c);
    }
}

fn outline(img: &mut RgbImage, b: &BoundingBox) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (l, r, t, d) = (b.x_left * w, b.x_right * w - 1.0, b.y_top * h, b.y_down * h - 1.0);
    line(img, (l, t), (r, t), BOX_COLOR);
    line(img, (l, d), (r, d), BOX_COLOR);
    line(img, (l, t), (l, d), BOX_COLOR);
    line(img, (r, t), (r, d), BOX_COLOR);
}

/// Pixel that holds normalized point `(x, y)`.
pub fn pixel_of(x: f64, y: f64, width: u32, height: u32) -> (i64, i64) {
    ((x * width as f64).floor() as i64, (y * height as f64).floor() as i64)
}

/// Draws each person's box and a 3×3 marker in the class color at every keypoint.
pub fn draw_overlay(image: &RgbImage, people: &[PoseInstance]) -> RgbImage {
    let mut out = image.clone();
    for p in people {
        outline(&mut out, &p.bbox);
    }
    for p in people {
        for k in p.keypoints.iter().filter(|k| k.visible) {
            let (x, y) = pixel_of(k.x, k.y, out.width(), out.height());
            for dy in -1..=1 {
                for dx in -1..=1 {
                    put(&mut out, x + dx, y + dy, class_color(k.label));
                }
            }
        }
    }
    out
}

/// How per-query Gaussians combine into one map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stacking {
    #[default]
    Max,
    Sum,
}

/// Gaussian width in pixels: 2 at a 64-pixel-wide raster, proportional otherwise.
pub fn default_sigma(width: usize) -> f64 {
    2.0 * width as f64 / 64.0
}

/// `width×height` map (row-major) of Gaussians centered at normalized points
/// `(x, y)` with peak `p`, combined pointwise by `stacking`.
pub fn probability_map(points: &[(f64, f64, f64)], width: usize, height: usize, sigma: f64, stacking: Stacking) -> Vec<f64> {
    let mut map = vec![0.0f64; width * height];
    let s2 = 2.0 * sigma * sigma;
    for &(x, y, p) in points {
        let (cx, cy) = (x * width as f64, y * height as f64);
        for r in 0..height {
            let dy = r as f64 + 0.5 - cy;
            for c in 0..width {
                let dx = c as f64 + 0.5 - cx;
                let v = p * (-(dx * dx + dy * dy) / s2).exp();
                let m = &mut map[r * width + c];
                *m = match stacking {
                    Stacking::Max => (*m).max(v),
                    Stacking::Sum => *m + v,
                };
            }
        }
    }
    map
}

/// Grayscale image of a map scaled so that 1.0 is white (sums may saturate).
pub fn map_to_image(map: &[f64], width: usize, height: usize) -> image::GrayImage {
    image::GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let v = map[y as usize * width + x as usize];
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// All queries of one layer plus the readout it implies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub schema: String,
    pub version: u32,
    /// 0 is the query embedding, `l ≥ 1` decoder layer `l`.
    pub layer: usize,
    /// Per query, class probabilities over joints then background.
    pub probs: Vec<Vec<f64>>,
    /// Per query, normalized image coordinates.
    pub coords: Vec<[f64; 2]>,
    /// Query read out for each joint.
    pub selected: Vec<usize>,
    /// Image coordinates of the read-out keypoints.
    pub keypoints: Vec<[f64; 2]>,
}

/// Snapshots of layers `layers` (all layers when `None`).
pub fn layer_snapshots(model: &CascadeModel, out: &KeypointOutput, exclude_background: bool, layers: Option<std::ops::RangeInclusive<usize>>) -> Result<Vec<LayerSnapshot>, ModelError> {
    let n = out.layers.len();
    let range = layers.unwrap_or(0..=n);
    if *range.end() > n || range.is_empty() {
        return Err(TensorError::Contract(format!("layer range {range:?} outside 0..={n}")).into());
    }
    range
        .map(|l| {
            let lo = out.layer(l).expect("checked range");
            let r = readout_keypoints(lo, out.n_queries, model.n_joints(), exclude_background, model.config.class_specific_queries, &out.to_image)?;
            let k = lo.logits.len() / out.n_queries;
            Ok(LayerSnapshot {
                schema: crate::report::LAYER_SCHEMA.into(),
                version: crate::report::REPORT_VERSION,
                layer: l,
                probs: lo
                    .logits
                    .chunks(k)
                    .map(|z| crate::matcher::class_probabilities(z, false))
                    .collect(),
                coords: lo
                    .coords
                    .chunks(2)
                    .map(|c| {
                        let (x, y) = out.to_image.apply(c[0], c[1]);
                        [x, y]
                    })
                    .collect(),
                selected: r.queries,
                keypoints: r.keypoints.iter().map(|k| [k.x, k.y]).collect(),
            })
        })
        .collect()
}

/// Probability map of joint `j` at one layer: every query's Gaussian with peak
/// equal to its probability of class `j`.
pub fn joint_map(s: &LayerSnapshot, joint: usize, width: usize, height: usize, sigma: f64, stacking: Stacking) -> Vec<f64> {
    let pts: Vec<(f64, f64, f64)> = s
        .coords
        .iter()
        .zip(&s.probs)
        .map(|(c, p)| (c[0], c[1], p[joint]))
        .collect();
    probability_map(&pts, width, height, sigma, stacking)
}

/// Path of each read-out keypoint across layers, drawn in its class color.
pub fn draw_trajectories(image: &RgbImage, snapshots: &[LayerSnapshot]) -> RgbImage {
    let mut out = image.clone();
    let (w, h) = (out.width() as f64, out.height() as f64);
    let joints = snapshots.first().map_or(0, |s| s.keypoints.len());
    for j in 0..joints {
        for pair in snapshots.windows(2) {
            let (a, b) = (pair[0].keypoints[j], pair[1].keypoints[j]);
            line(&mut out, (a[0] * w, a[1] * h), (b[0] * w, b[1] * h), class_color(j));
        }
        if let Some(last) = snapshots.last() {
            let (x, y) = pixel_of(last.keypoints[j][0], last.keypoints[j][1], out.width(), out.height());
            put(&mut out, x, y, class_color(j));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Keypoint;

    #[test]
    fn map_peaks_at_strongest_point() {
        let pts = [(0.25, 0.25, 0.3), (47.5 / 64.0, 31.5 / 64.0, 0.9)];
        let m = probability_map(&pts, 64, 64, 2.0, Stacking::Max);
        let (i, &v) = m.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert_eq!((i % 64, i / 64), (47, 31));
        assert_eq!(v, 0.9);
    }

    #[test]
    fn sum_dominates_max() {
        let pts = [(0.5, 0.5, 0.5), (0.52, 0.5, 0.5)];
        let a = probability_map(&pts, 16, 16, 2.0, Stacking::Max);
        let b = probability_map(&pts, 16, 16, 2.0, Stacking::Sum);
        assert!(a.iter().zip(&b).all(|(x, y)| y >= x));
        assert!(b.iter().cloned().fold(0.0, f64::max) > 0.5);
    }

    #[test]
    fn overlay_marks_keypoints_in_class_colors() {
        let img = RgbImage::new(32, 32);
        let p = PoseInstance {
            bbox: BoundingBox::new(0.1, 0.9, 0.1, 0.9),
            keypoints: vec![
                Keypoint {
                    x: 0.5,
                    y: 0.4,
                    label: 0,
                    visible: true,
                    score: 1.0,
                },
                Keypoint {
                    x: 0.3,
                    y: 0.7,
                    label: 3,
                    visible: true,
                    score: 1.0,
                },
            ],
            score: 1.0,
        };
        let out = draw_overlay(&img, &[p]);
        assert_eq!(*out.get_pixel(16, 12), class_color(0));
        assert_eq!(*out.get_pixel(9, 22), class_color(3));
    }

    #[test]
    fn sigma_scales_with_width() {
        assert_eq!(default_sigma(64), 2.0);
        assert_eq!(default_sigma(128), 4.0);
    }
}
