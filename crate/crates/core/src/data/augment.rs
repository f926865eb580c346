//! Rotation, scale and flip augmentation of person crops.
//!
//! Augmentation is an affine map in the patch frame, applied before the
//! patch is mapped into the image. Pixels are resampled through it and
//! keypoints are moved by its inverse, so both follow the same transform.

use crate::cascade::twostage::crop_image_twostage;
use crate::geometry::{Affine2, Keypoint, PoseInstance};
use crate::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            max_rotation_deg: 40.0,
            min_scale: 0.7,
            max_scale: 1.3,
            flip_probability: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation_deg: 0.0,
        scale: 1.0,
        flip: false,
    };

    /// Draws parameters from a stream keyed by `(seed, index)`, so the draw for
    /// a sample never depends on which worker handles it.
    pub fn sample(cfg: &AugmentConfig, seed: u64, index: u64) -> AugmentParams {
        if !cfg.enabled {
            return AugmentParams::IDENTITY;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        AugmentParams {
            rotation_deg: rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg),
            scale: rng.gen_range(cfg.min_scale..=cfg.max_scale),
            flip: rng.gen_bool(cfg.flip_probability.clamp(0.0, 1.0)),
        }
    }

    /// Map from output patch coordinates to source patch coordinates for a
    /// `patch_h×patch_w` raster: rotation and scaling act about the patch
    /// center in pixel units; the flip mirrors the output.
    pub fn patch_transform(&self, patch_h: usize, patch_w: usize) -> Affine2 {
        let (pw, ph) = (patch_w as f64, patch_h as f64);
        let theta = -self.rotation_deg.to_radians();
        let (s, c) = theta.sin_cos();
        let to_px = Affine2::linear([[pw, 0.0], [0.0, ph]]);
        let from_px = Affine2::linear([[1.0 / pw, 0.0], [0.0, 1.0 / ph]]);
        let rot = Affine2::linear([[c / self.scale, -s / self.scale], [s / self.scale, c / self.scale]]);
        let about_center = Affine2::translation(0.5, 0.5)
            .compose(&from_px)
            .compose(&rot)
            .compose(&to_px)
            .compose(&Affine2::translation(-0.5, -0.5));
        if self.flip {
            about_center.compose(&Affine2 {
                a: [[-1.0, 0.0], [0.0, 1.0]],
                t: [1.0, 0.0],
            })
        } else {
            about_center
        }
    }
}

/// An augmented training patch with keypoints in its own frame.
#[derive(Debug, Clone)]
pub struct AugmentedCrop {
    pub pixels: Tensor,
    /// One slot per joint, labels already swapped when flipped. Coordinates
    /// may fall outside the unit square when a joint leaves the patch.
    pub keypoints: Vec<Keypoint>,
    pub to_image: Affine2,
}

/// Moves image-frame keypoints into a patch frame given by `to_image`.
pub fn keypoints_to_patch(pose: &PoseInstance, to_image: &Affine2, flip: bool, swap: &[usize]) -> Result<Vec<Keypoint>, TensorError> {
    let inv = to_image
        .inverse()
        .ok_or_else(|| TensorError::Contract("singular crop transform".into()))?;
    let mut out: Vec<Keypoint> = (0..pose.keypoints.len()).map(Keypoint::missing).collect();
    for k in &pose.keypoints {
        let label = if flip { swap[k.label] } else { k.label };
        let (x, y) = inv.apply(k.x, k.y);
        out[label] = Keypoint {
            x,
            y,
            label,
            visible: k.visible,
            score: k.score,
        };
    }
    Ok(out)
}

/// Aspect-extended crop of `pose`'s box with `params` applied to pixels and keypoints.
pub fn augment_crop(image: &Tensor, pose: &PoseInstance, aspect: f64, out_h: usize, out_w: usize, params: &AugmentParams, swap: &[usize]) -> Result<AugmentedCrop, TensorError> {
    let aug = params.patch_transform(out_h, out_w);
    let patch = crop_image_twostage(image, &pose.bbox, aspect, out_h, out_w, Some(&aug))?;
    let keypoints = keypoints_to_patch(pose, &patch.to_image, params.flip, swap)?;
    Ok(AugmentedCrop {
        pixels: patch.pixels,
        keypoints,
        to_image: patch.to_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;

    const SWAP: [usize; 5] = [0, 2, 1, 4, 3];

    fn pose() -> PoseInstance {
        PoseInstance {
            bbox: BoundingBox::new(0.3, 0.6, 0.2, 0.8),
            keypoints: [(0.45, 0.3), (0.55, 0.5), (0.35, 0.5), (0.5, 0.75), (0.4, 0.75)]
                .iter()
                .enumerate()
                .map(|(label, &(x, y))| Keypoint {
                    x,
                    y,
                    label,
                    visible: true,
                    score: 1.0,
                })
                .collect(),
            score: 1.0,
        }
    }

    fn close(a: &Affine2, b: &Affine2, tol: f64) -> bool {
        (0..2).all(|i| (0..2).all(|j| (a.a[i][j] - b.a[i][j]).abs() < tol) && (a.t[i] - b.t[i]).abs() < tol)
    }

    #[test]
    fn identity_params_identity_transform() {
        assert!(close(&AugmentParams::IDENTITY.patch_transform(64, 48), &Affine2::IDENTITY, 1e-15));
    }

    #[test]
    fn flip_twice_is_identity() {
        let f = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let t = f.patch_transform(64, 48);
        assert!(close(&t.compose(&t), &Affine2::IDENTITY, 1e-15));
        let image = Tensor::zeros(&[3, 64, 64]);
        let once = augment_crop(&image, &pose(), 4.0 / 3.0, 64, 48, &f, &SWAP).unwrap();
        let plain = augment_crop(&image, &pose(), 4.0 / 3.0, 64, 48, &AugmentParams::IDENTITY, &SWAP).unwrap();
        for k in &once.keypoints {
            let src = &plain.keypoints[SWAP[k.label]];
            assert!((k.x - (1.0 - src.x)).abs() < 1e-12 && (k.y - src.y).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_roundtrip() {
        let p = |deg| AugmentParams {
            rotation_deg: deg,
            ..AugmentParams::IDENTITY
        };
        let t = p(40.0).patch_transform(64, 48).compose(&p(-40.0).patch_transform(64, 48));
        for (x, y) in [(0.1, 0.2), (0.9, 0.7), (0.5, 0.5)] {
            let (u, v) = t.apply(x, y);
            assert!((u - x).abs() < 1e-6 && (v - y).abs() < 1e-6);
        }
    }

    #[test]
    fn keypoints_follow_pixels() {
        // a single bright pixel is carried to the keypoint's patch location
        let mut data = vec![0.0; 3 * 64 * 64];
        let (px, py) = (29usize, 30usize);
        for c in 0..3 {
            data[c * 4096 + py * 64 + px] = 1.0;
        }
        let image = Tensor::new(&[3, 64, 64], data).unwrap();
        let mut pose = pose();
        pose.keypoints[0].x = (px as f64 + 0.5) / 64.0;
        pose.keypoints[0].y = (py as f64 + 0.5) / 64.0;
        let params = AugmentParams {
            rotation_deg: 25.0,
            scale: 1.2,
            flip: false,
        };
        let crop = augment_crop(&image, &pose, 4.0 / 3.0, 64, 48, &params, &SWAP).unwrap();
        let k = crop.keypoints[0];
        let (cx, cy) = ((k.x * 48.0 - 0.5).round() as usize, (k.y * 64.0 - 0.5).round() as usize);
        let hot = crop.pixels.data()[cy * 48 + cx];
        let max = crop.pixels.data()[..64 * 48].iter().copied().fold(0.0, f64::max);
        assert!(hot > 0.0 && (hot - max).abs() < 0.35, "hot {hot} max {max}");
    }

    #[test]
    fn sampling_is_keyed_by_index() {
        let cfg = AugmentConfig::default();
        assert_eq!(AugmentParams::sample(&cfg, 7, 3), AugmentParams::sample(&cfg, 7, 3));
        assert_ne!(AugmentParams::sample(&cfg, 7, 3), AugmentParams::sample(&cfg, 7, 4));
        let off = AugmentConfig {
            enabled: false,
            ..cfg
        };
        assert_eq!(AugmentParams::sample(&off, 7, 3), AugmentParams::IDENTITY);
    }
}
