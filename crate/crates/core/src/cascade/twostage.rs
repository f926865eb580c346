//! Fixed-aspect image patches for the two-stage variant.

use crate::geometry::{Affine2, BoundingBox};
use crate::tensor::{Tensor, TensorError};

/// A resampled patch and the map from patch-normalized to image-normalized coordinates.
#[derive(Debug, Clone)]
pub struct Patch {
    /// `[3×patch_h×patch_w]`
    pub pixels: Tensor,
    pub to_image: Affine2,
    /// Box after aspect extension (before any augmentation).
    pub extended: BoundingBox,
}

/// Extends `bbox` symmetrically along one axis so that its pixel
/// height:width equals `aspect`.
pub fn extend_to_aspect(bbox: &BoundingBox, aspect: f64, image_h: usize, image_w: usize) -> Result<BoundingBox, TensorError> {
    if !bbox.is_valid() || !(aspect > 0.0) {
        return Err(TensorError::Contract(format!(
            "cannot extend {bbox:?} to aspect {aspect}"
        )));
    }
    let (cx, cy) = bbox.center();
    let wp = bbox.width() * image_w as f64;
    let hp = bbox.height() * image_h as f64;
    let (wp, hp) = if hp / wp < aspect {
        (wp, wp * aspect)
    } else {
        (hp / aspect, hp)
    };
    Ok(BoundingBox::from_cxcywh(
        cx,
        cy,
        wp / image_w as f64,
        hp / image_h as f64,
    ))
}

/// Bilinear resampling of `image` (`[C×H×W]`) onto an `out_h×out_w` raster
/// whose unit frame maps into the image through `to_image`.
pub fn resample_affine(image: &Tensor, to_image: &Affine2, out_h: usize, out_w: usize) -> Result<Tensor, TensorError> {
    let &[_, h, w] = image.shape() else {
        return Err(TensorError::Contract(format!(
            "expected a [C×H×W] image, got {:?}",
            image.shape()
        )));
    };
    let mut xs = Vec::with_capacity(out_h * out_w);
    let mut ys = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let v = (r as f64 + 0.5) / out_h as f64;
        for c in 0..out_w {
            let u = (c as f64 + 0.5) / out_w as f64;
            let (x, y) = to_image.apply(u, v);
            xs.push(x * w as f64 - 0.5);
            ys.push(y * h as f64 - 0.5);
        }
    }
    image.bilinear_sample(
        &Tensor::new(&[out_h, out_w], xs)?,
        &Tensor::new(&[out_h, out_w], ys)?,
    )
}

/// Extends the detection box to `aspect` (height:width) and resamples an
/// `out_h×out_w` patch over it.
///
/// `augment` is applied in the patch frame before mapping into the image, so
/// a rotation about `(0.5, 0.5)` rotates the content about the box center.
pub fn crop_image_twostage(image: &Tensor, bbox: &BoundingBox, aspect: f64, out_h: usize, out_w: usize, augment: Option<&Affine2>) -> Result<Patch, TensorError> {
    let &[_, h, w] = image.shape() else {
        return Err(TensorError::Contract(format!(
            "expected a [C×H×W] image, got {:?}",
            image.shape()
        )));
    };
    let extended = extend_to_aspect(bbox, aspect, h, w)?;
    let base = Affine2::from_box(&extended);
    let to_image = match augment {
        Some(a) => base.compose(a),
        None => base,
    };
    Ok(Patch {
        pixels: resample_affine(image, &to_image, out_h, out_w)?,
        to_image,
        extended,
    })
}
