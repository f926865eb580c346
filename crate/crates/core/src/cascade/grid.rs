//! Crop grids and differentiable bilinear cropping of feature maps.
//!
//! A grid holds `w×h` sample points in normalized image coordinates. Sampling
//! converts them to source pixel coordinates with `px = x·W_f − 0.5` so that
//! normalized `(m + 0.5)/W_f` lands exactly on pixel `m`.

use crate::geometry::BoundingBox;
use crate::nn::GridConvention;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct CropGrid {
    /// Column coordinates `x_0 … x_{w-1}`.
    pub xs: Vec<f64>,
    /// Row coordinates `y_0 … y_{h-1}`.
    pub ys: Vec<f64>,
}

impl CropGrid {
    pub fn width(&self) -> usize {
        self.xs.len()
    }

    pub fn height(&self) -> usize {
        self.ys.len()
    }

    /// All `(x, y)` samples, row by row.
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.ys
            .iter()
            .flat_map(move |&y| self.xs.iter().map(move |&x| (x, y)))
    }
}

/// Interpolation weights `(α_i, β_i)` with `x_i = α_i·lo + β_i·hi`.
pub fn grid_weights(n: usize, convention: GridConvention) -> Vec<(f64, f64)> {
    let denom = match convention {
        GridConvention::HalfOpen => n as f64,
        GridConvention::AlignCorners => (n.max(2) - 1) as f64,
    };
    (0..n)
        .map(|i| {
            let i = i as f64;
            ((denom - i) / denom, i / denom)
        })
        .collect()
}

/// `x_i = ((w−i)/w)·x_left + (i/w)·x_right`, likewise for `y_j`.
pub fn make_grid(bbox: &BoundingBox, w: usize, h: usize, convention: GridConvention) -> Result<CropGrid, TensorError> {
    if w == 0 || h == 0 {
        return Err(TensorError::Contract(format!("empty {w}×{h} grid")));
    }
    if !bbox.is_valid() {
        return Err(TensorError::Contract(format!("degenerate crop box {bbox:?}")));
    }
    let axis = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
        grid_weights(n, convention)
            .into_iter()
            .map(|(a, b)| a * lo + b * hi)
            .collect()
    };
    Ok(CropGrid {
        xs: axis(bbox.x_left, bbox.x_right, w),
        ys: axis(bbox.y_top, bbox.y_down, h),
    })
}

/// Bilinear samples of `u` (`[C×H_f×W_f]`) at every grid point: `[C×h×w]`.
pub fn grid_sample(u: &Tensor, grid: &CropGrid) -> Result<Tensor, TensorError> {
    let (hf, wf) = map_extent(u)?;
    let (w, h) = (grid.width(), grid.height());
    let mut gx = Vec::with_capacity(w * h);
    let mut gy = Vec::with_capacity(w * h);
    for (x, y) in grid.points() {
        gx.push(x * wf as f64 - 0.5);
        gy.push(y * hf as f64 - 0.5);
    }
    u.bilinear_sample(&Tensor::new(&[h, w], gx)?, &Tensor::new(&[h, w], gy)?)
}

fn map_extent(u: &Tensor) -> Result<(usize, usize), TensorError> {
    match u.shape() {
        &[_, h, w] => Ok((h, w)),
        s => Err(TensorError::Contract(format!(
            "expected a [C×H×W] feature map, got {s:?}"
        ))),
    }
}

/// Differentiable grid axes from a box tensor `[x_left, x_right, y_top, y_down]`:
/// returns `(xs [w], ys [h])`.
pub fn grid_axes(edges: &Tensor, w: usize, h: usize, convention: GridConvention) -> Result<(Tensor, Tensor), TensorError> {
    if edges.shape() != [4] {
        return Err(TensorError::Contract(format!(
            "box tensor must have shape [4], got {:?}",
            edges.shape()
        )));
    }
    let axis = |start: usize, n: usize| -> Result<Tensor, TensorError> {
        let coeff: Vec<f64> = grid_weights(n, convention)
            .into_iter()
            .flat_map(|(a, b)| [a, b])
            .collect();
        Tensor::new(&[n, 2], coeff)?
            .matmul(&edges.slice(0, start, start + 2)?.reshape(&[2, 1])?)?
            .reshape(&[n])
    };
    Ok((axis(0, w)?, axis(2, h)?))
}

/// [`grid_sample`] with gradients flowing to the box tensor as well as the map.
pub fn sample_box(u: &Tensor, edges: &Tensor, w: usize, h: usize, convention: GridConvention) -> Result<Tensor, TensorError> {
    let (hf, wf) = map_extent(u)?;
    let (xs, ys) = grid_axes(edges, w, h, convention)?;
    let px = xs.scale(wf as f64)?.add_scalar(-0.5)?;
    let py = ys.scale(hf as f64)?.add_scalar(-0.5)?;
    let gx = Tensor::zeros(&[h, w]).add(&px)?;
    let gy = Tensor::zeros(&[w, h]).add(&py)?.transpose()?;
    u.bilinear_sample(&gx, &gy)
}

/// `(cx, cy, w, h)` → `[x_left, x_right, y_top, y_down]` as a linear map.
pub fn cxcywh_to_edges(b: &Tensor) -> Result<Tensor, TensorError> {
    #[rustfmt::skip]
    let m = Tensor::new(&[4, 4], vec![
        1.0, 1.0, 0.0, 0.0,
        0.0, 0.0, 1.0, 1.0,
        -0.5, 0.5, 0.0, 0.0,
        0.0, 0.0, -0.5, 0.5,
    ])?;
    b.reshape(&[1, 4])?.matmul(&m)?.reshape(&[4])
}

/// Grows a box tensor by `factor` about its center, then clamps to the image.
pub fn enlarge_edges(edges: &Tensor, factor: f64) -> Result<Tensor, TensorError> {
    let (p, q) = (1.0 + factor / 2.0, -factor / 2.0);
    #[rustfmt::skip]
    let m = Tensor::new(&[4, 4], vec![
        p, q, 0.0, 0.0,
        q, p, 0.0, 0.0,
        0.0, 0.0, p, q,
        0.0, 0.0, q, p,
    ])?;
    edges.reshape(&[1, 4])?.matmul(&m)?.reshape(&[4])?.clamp(0.0, 1.0)
}

pub fn edges_to_box(edges: &Tensor) -> BoundingBox {
    let e = edges.data();
    BoundingBox::new(e[0], e[1], e[2], e[3])
}

/// Crop of each stride-4/8/16 map over the enlarged, clamped box, stacked
/// channel-wise into `[(ΣC)×h×w]`.
///
/// `edges` is the unenlarged box as `[x_left, x_right, y_top, y_down]`.
/// Returns the crop and the box actually sampled.
pub fn crop_features_multiscale(maps: &[Tensor], edges: &Tensor, enlarge_factor: f64, w: usize, h: usize, convention: GridConvention) -> Result<(Tensor, BoundingBox), TensorError> {
    let crop = enlarge_edges(edges, enlarge_factor)?;
    let bbox = edges_to_box(&crop);
    if !bbox.is_valid() {
        return Err(TensorError::Contract(format!(
            "crop box {bbox:?} lies outside the image"
        )));
    }
    Ok((sample_multiscale(maps, &crop, w, h, convention)?, bbox))
}

/// Samples every map over the same box and stacks the results channel-wise.
pub fn sample_multiscale(maps: &[Tensor], edges: &Tensor, w: usize, h: usize, convention: GridConvention) -> Result<Tensor, TensorError> {
    let parts = maps
        .iter()
        .map(|u| sample_box(u, edges, w, h, convention))
        .collect::<Result<Vec<_>, _>>()?;
    Tensor::concat(&parts, 0)
}

/// `[C×h×w]` crop → `[h·w × C]` token rows.
pub fn crop_to_tokens(crop: &Tensor) -> Result<Tensor, TensorError> {
    let &[c, h, w] = crop.shape() else {
        return Err(TensorError::Contract(format!(
            "expected [C×h×w] crop, got {:?}",
            crop.shape()
        )));
    };
    crop.reshape(&[c, h * w])?.transpose()
}
