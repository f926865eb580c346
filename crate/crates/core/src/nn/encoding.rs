//! Two-dimensional sinusoidal positional encoding.

use super::config::{ConfigError, GridConvention};
use crate::cascade::grid::make_grid;
use crate::geometry::BoundingBox;
use crate::tensor::Tensor;
use std::f64::consts::TAU;

const TEMPERATURE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PositionFrame {
    /// Token `(i, j)` of an `h×w` map sits at `(i/w, j/h)` in image coordinates.
    Absolute,
    /// Tokens are crop samples of `bbox`; positions are re-expressed in the box's
    /// own unit frame before encoding.
    BoxRelative(BoundingBox, GridConvention),
}

/// Encodes normalized `(x, y)` into `d` channels: the first half encodes `y`,
/// the second `x`, each as interleaved (sin, cos) pairs of geometric frequencies.
pub fn sine_encode(x: f64, y: f64, d: usize, out: &mut [f64]) {
    let half = d / 2;
    for (offset, v) in [(0, y), (half, x)] {
        for k in 0..half / 2 {
            let freq = TEMPERATURE.powf(2.0 * k as f64 / half as f64);
            let angle = v * TAU / freq;
            out[offset + 2 * k] = angle.sin();
            out[offset + 2 * k + 1] = angle.cos();
        }
    }
}

/// `[height × width × d]` encoding of a token lattice.
pub fn positional_encoding_2d(height: usize, width: usize, d: usize, frame: PositionFrame) -> Result<Tensor, ConfigError> {
    if d == 0 || d % 4 != 0 {
        return Err(ConfigError(format!(
            "positional encoding needs d_model divisible by 4, got {d}"
        )));
    }
    let mut data = vec![0.0; height * width * d];
    let points: Vec<(f64, f64)> = match frame {
        PositionFrame::Absolute => (0..height)
            .flat_map(|j| {
                (0..width).map(move |i| (i as f64 / width as f64, j as f64 / height as f64))
            })
            .collect(),
        PositionFrame::BoxRelative(bbox, convention) => {
            let grid = make_grid(&bbox, width, height, convention)
                .map_err(|e| ConfigError(e.to_string()))?;
            grid.points()
                .map(|(x, y)| {
                    (
                        (x - bbox.x_left) / bbox.width(),
                        (y - bbox.y_top) / bbox.height(),
                    )
                })
                .collect()
        }
    };
    for (k, (x, y)) in points.into_iter().enumerate() {
        sine_encode(x, y, d, &mut data[k * d..(k + 1) * d]);
    }
    Ok(Tensor::new(&[height, width, d], data).expect("sized above"))
}
