//! 8-bit RGB rasters and their conversion to model input tensors.

use super::DataError;
use crate::geometry::Affine2;
use crate::tensor::Tensor;
use crate::cascade::twostage::resample_affine;
use image::RgbImage;
use std::path::Path;

pub fn read_rgb(path: &Path) -> Result<RgbImage, DataError> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|source| DataError::Image {
            path: path.display().to_string(),
            source,
        })
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<(), DataError> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| DataError::Image {
            path: path.display().to_string(),
            source,
        })
}

/// `[3×H×W]` tensor with channels in `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("sized from image")
}

pub fn tensor_to_rgb(t: &Tensor) -> RgbImage {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[c * h * w + y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([at(0), at(1), at(2)])
    })
}

/// Converts and, when the raster size differs, bilinearly resamples to `height×width`.
pub fn to_model_input(img: &RgbImage, height: usize, width: usize) -> Tensor {
    let t = rgb_to_tensor(img);
    if t.shape()[1] == height && t.shape()[2] == width {
        return t;
    }
    resample_affine(&t, &Affine2::IDENTITY, height, width).expect("3-channel image")
}

/// Horizontal mirror of a `[C×H×W]` tensor.
pub fn mirror_tensor(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let src = t.data();
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                data[row + x] = src[row + w - 1 - x];
            }
        }
    }
    Tensor::new(t.shape(), data).expect("same shape")
}
